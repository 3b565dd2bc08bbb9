#include "realign/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "realign/random.hpp"

namespace realign {

namespace {

constexpr char kMagic[8] = {'R', 'L', 'G', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kConfigRecordSize = 6 * 4 + 8;

std::string block_prefix(int block) { return "blocks." + std::to_string(block) + "."; }

void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq) {
    throw ContractError("forward: " + std::to_string(tokens.size()) + " tokens exceed max_seq " + std::to_string(c.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw ContractError("forward: token id " + std::to_string(t) + " outside vocabulary");
  }
}

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  std::vector<std::uint8_t> out;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > data_.size()) throw FormatError("checkpoint: truncated file");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    using U = std::make_unsigned_t<T>;
    auto s = take(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(s[i]) << (8 * i));
    return static_cast<T>(u);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ContractError("model config: " + m); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (d_model < 1 || n_heads < 1 || d_ff < 1 || max_seq < 1) fail("dimensions must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers < 3) fail("n_layers must be >= 3");
}

bool ModelConfig::same_layout(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && d_model == o.d_model && n_layers == o.n_layers && n_heads == o.n_heads &&
         d_ff == o.d_ff && max_seq == o.max_seq;
}

void Model::add_param(std::string name, int block, Shape shape) {
  info_.push_back({std::move(name), block, flat_size_});
  params_.emplace_back(std::move(shape));
  flat_size_ += params_.back().numel();
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const Index V = config_.vocab_size, D = config_.d_model, F = config_.d_ff, T = config_.max_seq;
  add_param("tok_emb", 0, {V, D});
  add_param("pos_emb", 0, {T, D});
  for (int b = 1; b <= config_.n_layers; ++b) {
    const std::string p = block_prefix(b);
    add_param(p + "ln1.gain", b, {D});
    add_param(p + "ln1.bias", b, {D});
    for (const char* m : {"q", "k", "v", "o"}) {
      add_param(p + "attn.w" + m, b, {D, D});
      add_param(p + "attn.b" + m, b, {D});
    }
    add_param(p + "ln2.gain", b, {D});
    add_param(p + "ln2.bias", b, {D});
    add_param(p + "mlp.w1", b, {D, F});
    add_param(p + "mlp.b1", b, {F});
    add_param(p + "mlp.w2", b, {F, D});
    add_param(p + "mlp.b2", b, {D});
  }
  const int out = config_.n_layers + 1;
  add_param("ln_f.gain", out, {D});
  add_param("ln_f.bias", out, {D});
  add_param("head.w", out, {D, V});
  add_param("head.b", out, {V});

  // Embeddings ~ N(0, 0.1^2); linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
  // norm gains 1 and biases 0.
  Rng rng(config_.seed);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& name = info_[i].name;
    auto vals = params_[i].values();
    if (name == "tok_emb" || name == "pos_emb") {
      for (float& v : vals) v = static_cast<float>(0.1 * rng.normal());
    } else if (name.ends_with(".gain")) {
      std::fill(vals.begin(), vals.end(), 1.0f);
    } else if (name.ends_with("ln1.bias") || name.ends_with("ln2.bias") || name == "ln_f.bias") {
      std::fill(vals.begin(), vals.end(), 0.0f);
    } else {
      const bool second_mlp = name.ends_with("mlp.w2") || name.ends_with("mlp.b2");
      const double fan_in = second_mlp ? F : D;
      const double bound = 1.0 / std::sqrt(fan_in);
      for (float& v : vals) v = static_cast<float>(rng.uniform(-bound, bound));
    }
  }
}

std::size_t Model::param_index(const std::string& name) const {
  for (std::size_t i = 0; i < info_.size(); ++i) {
    if (info_[i].name == name) return i;
  }
  throw ContractError("model: no parameter named " + name);
}

std::pair<std::size_t, Index> Model::locate(Index k) const {
  if (k < 0 || k >= flat_size_) throw ContractError("model: flat index " + std::to_string(k) + " out of range");
  auto it = std::upper_bound(info_.begin(), info_.end(), k, [](Index x, const ParamInfo& p) { return x < p.offset; });
  const auto i = static_cast<std::size_t>(std::distance(info_.begin(), it) - 1);
  return {i, k - info_[i].offset};
}

float Model::flat(Index k) const {
  auto [i, off] = locate(k);
  return params_[i][off];
}

void Model::set_flat(Index k, float v) {
  auto [i, off] = locate(k);
  params_[i][off] = v;
}

Index Model::prefix_end(int block) const {
  Index end = 0;
  for (std::size_t i = 0; i < info_.size(); ++i) {
    if (info_[i].block <= block) end = info_[i].offset + params_[i].numel();
  }
  return end;
}

std::vector<float> Model::flatten() const {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(flat_size_));
  for (const auto& p : params_) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

void Model::assign_flat(std::span<const float> values) {
  if (static_cast<Index>(values.size()) != flat_size_) throw DimensionError("model: flat value count mismatch");
  std::size_t at = 0;
  for (auto& p : params_) {
    auto dst = p.values();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), dst.size(), dst.begin());
    at += dst.size();
  }
}

BoundModel bind(Graph<float>& g, const Model& model, Index grad_prefix) {
  BoundModel b{&model, {}};
  b.params.reserve(model.param_count());
  for (std::size_t i = 0; i < model.param_count(); ++i) {
    const Index end = model.info(i).offset + model.param(i).numel();
    b.params.push_back(g.leaf(model.param(i), end <= grad_prefix));
  }
  return b;
}

Trace trace(const BoundModel& bound, std::span<const int> tokens, const TraceOptions& options) {
  const Model& m = *bound.model;
  const ModelConfig& c = m.config();
  check_tokens(c, tokens);
  if (options.stop_after < 0 || options.stop_after > c.n_layers) throw ContractError("forward: stop_after out of range");
  if (options.shift && (options.shift->layer < 1 || options.shift->layer > c.n_layers)) {
    throw ContractError("forward: shift layer out of range");
  }
  auto P = [&](const std::string& name) { return bound.params[m.param_index(name)]; };

  const Index T = static_cast<Index>(tokens.size());
  const Index dh = c.d_model / c.n_heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  Graph<float>& g = *bound.params[0].graph;

  std::vector<int> positions(static_cast<std::size_t>(T));
  for (Index i = 0; i < T; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i);

  Trace tr;
  Var<float> h = embedding(P("tok_emb"), tokens) + embedding(P("pos_emb"), std::span<const int>(positions));
  tr.hidden.push_back(h);

  for (int b = 1; b <= c.n_layers; ++b) {
    const std::string p = block_prefix(b);
    Var<float> a = layer_norm(h, P(p + "ln1.gain"), P(p + "ln1.bias"));
    Var<float> q = matmul(a, P(p + "attn.wq")) + P(p + "attn.bq");
    Var<float> k = matmul(a, P(p + "attn.wk")) + P(p + "attn.bk");
    Var<float> v = matmul(a, P(p + "attn.wv")) + P(p + "attn.bv");
    std::vector<Var<float>> heads;
    for (int j = 0; j < c.n_heads; ++j) {
      Var<float> qs = slice_cols(q, j * dh, dh);
      Var<float> ks = slice_cols(k, j * dh, dh);
      Var<float> vs = slice_cols(v, j * dh, dh);
      Var<float> probs = softmax(scale(matmul(qs, transpose(ks)), att_scale), /*causal=*/true);
      heads.push_back(matmul(probs, vs));
    }
    Var<float> att = matmul(concat_cols<float>(heads), P(p + "attn.wo")) + P(p + "attn.bo");
    h = h + att;
    Var<float> f = layer_norm(h, P(p + "ln2.gain"), P(p + "ln2.bias"));
    f = gelu(matmul(f, P(p + "mlp.w1")) + P(p + "mlp.b1"));
    f = matmul(f, P(p + "mlp.w2")) + P(p + "mlp.b2");
    h = h + f;
    if (options.shift && options.shift->layer == b) {
      const auto& s = options.shift->shift;
      if (s.rows() != 1 || s.cols() != c.d_model) throw DimensionError("forward: shift must be 1 x d_model");
      RowMatrix<float> delta = RowMatrix<float>::Zero(T, c.d_model);
      delta.row(T - 1) = s.row(0);
      h = h + g.constant(std::move(delta));
    }
    tr.hidden.push_back(h);
    if (options.stop_after == b) return tr;
  }
  Var<float> out = layer_norm(h, P("ln_f.gain"), P("ln_f.bias"));
  tr.logits = matmul(out, P("head.w")) + P("head.b");
  return tr;
}

ForwardOutput forward(const Model& model, std::span<const int> tokens, const TraceOptions& options) {
  Graph<float> g;
  BoundModel b = bind(g, model, 0);
  Trace tr = trace(b, tokens, options);
  ForwardOutput out;
  if (tr.logits) out.logits = tr.logits->value();
  for (auto& h : tr.hidden) out.hidden.push_back(h.value());
  return out;
}

RowMatrix<float> hidden_last_token(const Model& model, std::span<const int> tokens, int layer) {
  if (layer < 1 || layer > model.config().n_layers) {
    throw ContractError("hidden_last_token: layer " + std::to_string(layer) + " outside 1.." +
                        std::to_string(model.config().n_layers));
  }
  Graph<float> g;
  BoundModel b = bind(g, model, 0);
  TraceOptions opt;
  opt.stop_after = layer;
  Trace tr = trace(b, tokens, opt);
  const auto& h = tr.hidden[static_cast<std::size_t>(layer)].value();
  return h.row(h.rows() - 1);
}

Tokens generate(const Model& model, std::span<const int> prompt, int max_new, std::optional<int> eos) {
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  Tokens seq(prompt.begin(), prompt.end());
  Tokens out;
  for (int step = 0; step < max_new && static_cast<int>(seq.size()) < model.config().max_seq; ++step) {
    ForwardOutput f = forward(model, seq);
    const auto last = f.logits.row(f.logits.rows() - 1);
    int best = 0;
    for (int j = 1; j < last.cols(); ++j) {
      if (last(j) > last(best)) best = j;
    }
    out.push_back(best);
    seq.push_back(best);
    if (eos && best == *eos) break;
  }
  return out;
}

std::pair<Tokens, std::vector<int>> teacher_forcing(const Example& ex) {
  if (ex.prompt.empty() || ex.answer.empty()) throw ContractError("example: prompt and answer must be non-empty");
  Tokens seq = ex.prompt;
  seq.insert(seq.end(), ex.answer.begin(), ex.answer.end() - 1);
  std::vector<int> targets(seq.size(), -1);
  for (std::size_t j = 0; j < ex.answer.size(); ++j) targets[ex.prompt.size() - 1 + j] = ex.answer[j];
  return {std::move(seq), std::move(targets)};
}

float example_loss(const Model& model, const Example& ex) {
  Graph<float> g;
  BoundModel b = bind(g, model, 0);
  auto [seq, targets] = teacher_forcing(ex);
  Trace tr = trace(b, seq);
  return cross_entropy(*tr.logits, std::span<const int>(targets)).value()(0, 0);
}

float train_step(Model& model, std::span<const Example> batch, float lr) {
  if (!(lr > 0.0f)) throw ContractError("train_step: lr must be positive");
  if (batch.empty()) throw ContractError("train_step: empty batch");
  Graph<float> g;
  BoundModel b = bind(g, model, model.flat_size());
  std::optional<Var<float>> total;
  for (const Example& ex : batch) {
    auto [seq, targets] = teacher_forcing(ex);
    Trace tr = trace(b, seq);
    Var<float> l = cross_entropy(*tr.logits, std::span<const int>(targets));
    total = total ? *total + l : l;
  }
  Var<float> loss = scale(*total, 1.0f / static_cast<float>(batch.size()));
  g.backward(loss);
  for (std::size_t i = 0; i < model.param_count(); ++i) {
    model.param(i).matrix() -= lr * g.grad(b.params[i]);
  }
  return loss.value()(0, 0);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t byte : bytes) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize(const Model& model) {
  const ModelConfig& c = model.config();
  ByteWriter w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le<std::uint32_t>(kVersion);
  w.le<std::uint32_t>(kConfigRecordSize);
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq}) w.le<std::int32_t>(v);
  w.le<std::uint64_t>(c.seed);
  w.le<std::uint64_t>(static_cast<std::uint64_t>(model.flat_size()));
  const std::size_t blob_start = w.out.size();
  for (float f : model.flatten()) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(f));
  const std::uint64_t sum = fnv1a64(std::span(w.out).subspan(blob_start));
  w.le<std::uint64_t>(sum);
  return std::move(w.out);
}

Model deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(sizeof(kMagic));
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw FormatError("checkpoint: bad magic");
  if (const auto v = r.le<std::uint32_t>(); v != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  if (r.le<std::uint32_t>() != kConfigRecordSize) throw FormatError("checkpoint: bad config record length");
  ModelConfig c;
  c.vocab_size = r.le<std::int32_t>();
  c.d_model = r.le<std::int32_t>();
  c.n_layers = r.le<std::int32_t>();
  c.n_heads = r.le<std::int32_t>();
  c.d_ff = r.le<std::int32_t>();
  c.max_seq = r.le<std::int32_t>();
  c.seed = r.le<std::uint64_t>();
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  Model m(c);
  const auto count = r.le<std::uint64_t>();
  if (count != static_cast<std::uint64_t>(m.flat_size())) {
    throw FormatError("checkpoint: declares " + std::to_string(count) + " parameters but config implies " +
                      std::to_string(m.flat_size()));
  }
  auto blob = r.take(static_cast<std::size_t>(count) * 4);
  const auto sum = r.le<std::uint64_t>();
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  if (fnv1a64(blob) != sum) throw FormatError("checkpoint: checksum mismatch");
  std::vector<float> values(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u = 0;
    for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(blob[4 * i + b]) << (8 * b);
    values[i] = std::bit_cast<float>(u);
  }
  m.assign_flat(values);
  return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::vector<Index> weight_diff(const Model& a, const Model& b) {
  if (!a.config().same_layout(b.config())) throw ConfigMismatchError("weight_diff: model configs differ");
  std::vector<Index> out;
  const auto fa = a.flatten();
  const auto fb = b.flatten();
  for (std::size_t i = 0; i < fa.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(fa[i]) != std::bit_cast<std::uint32_t>(fb[i])) out.push_back(static_cast<Index>(i));
  }
  return out;
}

}  // namespace realign
