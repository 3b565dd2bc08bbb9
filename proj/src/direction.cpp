#include "realign/direction.hpp"

namespace realign {

std::string to_string(DirectionSource s) { return s == DirectionSource::kHarmful ? "harmful" : "aligned"; }

DirectionSource direction_source_from_string(const std::string& s) {
  if (s == "harmful") return DirectionSource::kHarmful;
  if (s == "aligned") return DirectionSource::kAligned;
  throw FormatError("direction: unknown source '" + s + "'");
}

Var<float> trace_direction(const BoundModel& bound, std::span<const Tokens> prompts, int layer) {
  if (prompts.empty()) throw ContractError("extract_direction: empty prompt set");
  const int L = bound.model->config().n_layers;
  if (layer < 1 || layer > L) throw ContractError("extract_direction: layer " + std::to_string(layer) + " out of range");
  TraceOptions opt;
  opt.stop_after = layer;
  std::vector<Var<float>> last;
  last.reserve(prompts.size());
  for (const Tokens& p : prompts) {
    Trace tr = trace(bound, p, opt);
    Var<float> h = tr.hidden[static_cast<std::size_t>(layer)];
    last.push_back(row(h, h.rows() - 1));
  }
  return mean_rows(concat_rows<float>(last));
}

Direction extract_direction(const Model& model, std::span<const Tokens> prompts, int layer, DirectionSource source) {
  Graph<float> g;
  BoundModel b = bind(g, model, 0);
  Direction d{layer, trace_direction(b, prompts, layer).value(), source, prompts.size()};
  if (!(d.vector.squaredNorm() > 0.0f)) throw DegenerateDirectionError("extract_direction: zero-norm direction");
  return d;
}

namespace {

HiddenShift steering_shift(const Model& model, const SteeringSpec& spec) {
  if (spec.aligned.layer != spec.harmful.layer) throw ContractError("steer: directions come from different layers");
  if (spec.aligned.layer < 1 || spec.aligned.layer > model.config().n_layers) {
    throw ContractError("steer: layer out of range");
  }
  const Index d = model.config().d_model;
  if (spec.aligned.vector.size() != d || spec.harmful.vector.size() != d) {
    throw DimensionError("steer: direction length differs from d_model");
  }
  return {spec.aligned.layer, spec.alpha * spec.aligned.vector - spec.beta * spec.harmful.vector};
}

}  // namespace

RowMatrix<float> steer(const Model& model, std::span<const int> tokens, const SteeringSpec& spec) {
  TraceOptions opt;
  opt.shift = steering_shift(model, spec);
  return forward(model, tokens, opt).logits;
}

Tokens steer_generate(const Model& model, std::span<const int> prompt, const SteeringSpec& spec, int max_new,
                      std::optional<int> eos) {
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  TraceOptions opt;
  opt.shift = steering_shift(model, spec);
  Tokens seq(prompt.begin(), prompt.end());
  Tokens out;
  for (int step = 0; step < max_new && static_cast<int>(seq.size()) < model.config().max_seq; ++step) {
    const RowMatrix<float> logits = forward(model, seq, opt).logits;
    const auto last = logits.row(logits.rows() - 1);
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

float direction_loss(const Direction& target, const Direction& current) {
  if (target.layer != current.layer) throw ContractError("direction_loss: directions come from different layers");
  return -cosine(target.vector, current.vector);
}

Var<float> direction_loss(const Direction& target, Var<float> current) {
  if (target.vector.size() != current.value().size()) throw DimensionError("direction_loss: length mismatch");
  Var<float> t = current.graph->constant(target.vector);
  return -cosine_similarity(t, current);
}

RowMatrix<float> similarity_matrix(std::span<const Direction> directions) {
  const auto n = static_cast<Index>(directions.size());
  RowMatrix<float> out(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const auto& a = directions[static_cast<std::size_t>(i)];
      const auto& b = directions[static_cast<std::size_t>(j)];
      if (a.layer != b.layer) throw ContractError("similarity_matrix: directions come from different layers");
      out(i, j) = i == j ? 1.0f : cosine(a.vector, b.vector);
    }
  }
  return out;
}

RowMatrix<float> direction_similarity_report(std::span<const Model* const> models,
                                             std::span<const std::vector<Tokens>> prompt_sets, int layer,
                                             DirectionSource source) {
  if (models.empty()) return {};
  if (prompt_sets.size() != 1 && prompt_sets.size() != models.size()) {
    throw ContractError("direction_similarity_report: need one prompt set, or one per model");
  }
  std::vector<Direction> dirs;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (!models[i]->config().same_layout(models[0]->config())) {
      throw ConfigMismatchError("direction_similarity_report: model configs differ");
    }
    const auto& prompts = prompt_sets[prompt_sets.size() == 1 ? 0 : i];
    dirs.push_back(extract_direction(*models[i], prompts, layer, source));
  }
  return similarity_matrix(dirs);
}

nlohmann::json to_json(const Direction& d) {
  std::vector<float> v(d.vector.data(), d.vector.data() + d.vector.size());
  return {{"layer", d.layer}, {"source", to_string(d.source)}, {"n_prompts", d.n_prompts}, {"vector", v}};
}

Direction direction_from_json(const nlohmann::json& j) {
  try {
    Direction d;
    d.layer = j.at("layer").get<int>();
    d.source = direction_source_from_string(j.at("source").get<std::string>());
    d.n_prompts = j.at("n_prompts").get<std::size_t>();
    const auto v = j.at("vector").get<std::vector<float>>();
    d.vector = Eigen::Map<const RowMatrix<float>>(v.data(), 1, static_cast<Index>(v.size()));
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("direction: ") + e.what());
  }
}

}  // namespace realign
