#include "realign/recovery.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace realign {

std::string to_string(Scenario s) { return s == Scenario::kI ? "I" : "II"; }

Scenario scenario_from_string(const std::string& s) {
  if (s == "I" || s == "1") return Scenario::kI;
  if (s == "II" || s == "2") return Scenario::kII;
  throw FormatError("unknown scenario '" + s + "' (expected I or II)");
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kWarmup: return "warmup";
    case Phase::kContinue: return "continue";
    case Phase::kRollback: return "rollback";
  }
  return "?";
}

std::string to_string(Branch b) { return b == Branch::kRollbackFree ? "rollback-free" : "rollback"; }

void RecoveryConfig::validate() const {
  auto fail = [](const std::string& m) { throw ContractError("recovery config: " + m); };
  if (!(recovery_rate > 0.0 && recovery_rate <= 1.0)) fail("P must be in (0, 1]");
  if (!(rollback_rate >= 0.0 && rollback_rate <= 1.0)) fail("R must be in [0, 1]");
  if (epochs < 0) fail("epochs must be >= 0");
  if (warmup < 0 || warmup > epochs) fail("warmup must be in [0, epochs]");
  if (!(fuse_threshold >= 0.0)) fail("fuse threshold must be >= 0");
  if (direction_layer < 0) fail("direction layer must be >= 0");
}

int RecoveryConfig::layer_for(const ModelConfig& c) const {
  const int layer = direction_layer == 0 ? default_direction_layer(c.n_layers) : direction_layer;
  if (layer < 1 || layer > c.n_layers) {
    throw ContractError("recovery config: direction layer " + std::to_string(layer) + " outside 1.." +
                        std::to_string(c.n_layers));
  }
  return layer;
}

std::size_t selection_budget(double fraction, std::size_t n) {
  if (n == 0) return 0;
  const double k = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

CandidateSet sign_filter(std::span<const float> grad, std::span<const float> current, std::span<const float> target) {
  if (grad.size() != current.size() || grad.size() != target.size()) throw DimensionError("sign_filter: length mismatch");
  CandidateSet out;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    // Compare signs rather than the product, which can underflow to zero.
    const float delta = current[i] - target[i];
    if ((grad[i] > 0.0f && delta > 0.0f) || (grad[i] < 0.0f && delta < 0.0f)) {
      out.indices.push_back(static_cast<Index>(i));
      out.abs_grad.push_back(std::abs(grad[i]));
    }
  }
  return out;
}

std::vector<Index> select_top(const CandidateSet& candidates, double fraction) {
  const std::size_t n = candidates.indices.size();
  const std::size_t k = selection_budget(fraction, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (candidates.abs_grad[a] != candidates.abs_grad[b]) return candidates.abs_grad[a] > candidates.abs_grad[b];
    return candidates.indices[a] < candidates.indices[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
  std::vector<Index> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(candidates.indices[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

ResetStep reset_weights(const Model& target, Model& current, std::span<const Tokens> prompts,
                        const Direction& delta_target, double fraction) {
  if (!target.config().same_layout(current.config())) throw ConfigMismatchError("reset_weights: model configs differ");
  if (prompts.empty()) throw ContractError("reset_weights: empty prompt set");
  const int layer = delta_target.layer;
  const Index prefix = current.prefix_end(layer);

  Graph<float> g;
  BoundModel bound = bind(g, current, prefix);
  Var<float> dir = trace_direction(bound, prompts, layer);
  Var<float> loss = direction_loss(delta_target, dir);
  g.backward(loss);

  std::vector<float> grad;
  grad.reserve(static_cast<std::size_t>(prefix));
  for (std::size_t i = 0; i < current.param_count(); ++i) {
    if (current.info(i).block > layer) break;
    const auto& gm = g.grad(bound.params[i]);
    grad.insert(grad.end(), gm.data(), gm.data() + gm.size());
  }
  std::vector<float> cur = current.flatten();
  const std::vector<float> tgt = target.flatten();
  const auto n = static_cast<std::size_t>(prefix);

  ResetStep step;
  step.loss = loss.value()(0, 0);
  step.candidates = sign_filter(grad, std::span(cur).first(n), std::span(tgt).first(n));
  step.restored = select_top(step.candidates, fraction);
  for (Index k : step.restored) cur[static_cast<std::size_t>(k)] = tgt[static_cast<std::size_t>(k)];
  current.assign_flat(cur);
  return step;
}

PerformanceDrop zero_drop() {
  return [](const Model&) { return 0.0; };
}

double performance_drop(const Model& model, const std::function<double(const Model&)>& metric, double baseline_tp) {
  if (!(baseline_tp >= 0.0 && baseline_tp <= 100.0)) throw ContractError("performance_drop: baseline outside [0, 100]");
  return baseline_tp - metric(model);
}

Model recovery(const RecoveryContext& ctx, const Model& start, int rounds, bool rollback, bool fuse, Phase phase,
               std::vector<EpochRecord>& log) {
  Model prev = start;
  for (int e = 1; e <= rounds; ++e) {
    Model cur = prev;
    EpochRecord rec;
    rec.phase = phase;
    rec.epoch = e;

    ResetStep step = reset_weights(*ctx.original, cur, ctx.recovery_prompts, ctx.delta_harmful, ctx.config.recovery_rate);
    rec.loss = step.loss;
    rec.cosine_before = -step.loss;
    rec.candidates = step.candidates.indices.size();
    rec.restored = step.restored.size();
    const Direction after = extract_direction(cur, ctx.recovery_prompts, ctx.delta_harmful.layer, DirectionSource::kHarmful);
    rec.cosine_after = cosine(ctx.delta_harmful.vector, after.vector);
    if (ctx.keep_indices) rec.restored_indices = step.restored;

    if (rollback) {
      if (ctx.keep_indices) rec.differing_before_rollback = weight_diff(cur, *ctx.finetuned);
      ResetStep back = reset_weights(*ctx.finetuned, cur, ctx.rollback_prompts, ctx.delta_aligned, ctx.config.rollback_rate);
      rec.rollback_candidates = back.candidates.indices.size();
      rec.rolled_back = back.restored.size();
      if (ctx.keep_indices) rec.rolled_back_indices = std::move(back.restored);
    }

    rec.drop = ctx.drop(cur);
    if (fuse && rec.drop > ctx.config.fuse_threshold) {
      rec.fuse_triggered = true;
      log.push_back(std::move(rec));
      return prev;
    }
    log.push_back(std::move(rec));
    prev = std::move(cur);
  }
  return prev;
}

std::pair<Model, RecoveryReport> recover(const Model& original, const Model& finetuned,
                                         std::span<const Tokens> recovery_prompts,
                                         std::span<const Tokens> rollback_prompts, const RecoveryConfig& config,
                                         const PerformanceDrop& drop, bool keep_indices) {
  config.validate();
  if (!original.config().same_layout(finetuned.config())) throw ConfigMismatchError("recover: model configs differ");
  const int layer = config.layer_for(finetuned.config());

  RecoveryContext ctx;
  ctx.original = &original;
  ctx.finetuned = &finetuned;
  ctx.recovery_prompts = recovery_prompts;
  ctx.rollback_prompts = rollback_prompts;
  ctx.delta_harmful = extract_direction(original, recovery_prompts, layer, DirectionSource::kHarmful);
  if (!rollback_prompts.empty()) {
    ctx.delta_aligned = extract_direction(finetuned, rollback_prompts, layer, DirectionSource::kAligned);
  }
  ctx.drop = config.scenario == Scenario::kI ? zero_drop() : drop;
  ctx.config = config;
  ctx.keep_indices = keep_indices;

  RecoveryReport report;
  report.config = config;
  report.direction_layer = layer;

  Model warm = recovery(ctx, finetuned, config.warmup, false, false, Phase::kWarmup, report.epochs);
  report.warmup_drop = ctx.drop(warm);

  std::optional<Model> result;
  if (config.scenario == Scenario::kI || report.warmup_drop < config.fuse_threshold) {
    report.branch = Branch::kRollbackFree;
    result = recovery(ctx, warm, config.epochs - config.warmup, false, true, Phase::kContinue, report.epochs);
  } else {
    if (rollback_prompts.empty()) throw ContractError("recover: rollback needed but no rollback prompts given");
    report.branch = Branch::kRollback;
    result = recovery(ctx, finetuned, config.epochs, true, true, Phase::kRollback, report.epochs);
  }

  report.fuse_triggered = !report.epochs.empty() && report.epochs.back().fuse_triggered;
  report.final_drop = ctx.drop(*result);
  report.modified_vs_finetuned = weight_diff(*result, finetuned).size();
  report.differing_vs_original = weight_diff(*result, original).size();
  report.final_cosine =
      cosine(ctx.delta_harmful.vector, extract_direction(*result, recovery_prompts, layer, DirectionSource::kHarmful).vector);
  return {std::move(*result), std::move(report)};
}

nlohmann::json to_json(const RecoveryConfig& c) {
  return {{"p", c.recovery_rate},       {"r", c.rollback_rate}, {"epochs", c.epochs},
          {"warmup", c.warmup},         {"fuse_threshold", c.fuse_threshold},
          {"ldir", c.direction_layer},  {"scenario", to_string(c.scenario)}};
}

RecoveryConfig recovery_config_from_json(const nlohmann::json& j, RecoveryConfig c) {
  if (!j.is_object()) throw FormatError("recovery config: expected an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "p") c.recovery_rate = v.get<double>();
      else if (key == "r") c.rollback_rate = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "warmup") c.warmup = v.get<int>();
      else if (key == "fuse_threshold") c.fuse_threshold = v.get<double>();
      else if (key == "ldir") c.direction_layer = v.get<int>();
      else if (key == "scenario") c.scenario = scenario_from_string(v.get<std::string>());
      else throw FormatError("recovery config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("recovery config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"type", "epoch"},
                      {"phase", to_string(r.phase)},
                      {"epoch", r.epoch},
                      {"loss", r.loss},
                      {"cosine_before", r.cosine_before},
                      {"cosine_after", r.cosine_after},
                      {"candidates", r.candidates},
                      {"restored", r.restored},
                      {"rollback_candidates", r.rollback_candidates},
                      {"rolled_back", r.rolled_back},
                      {"drop_pp", r.drop},
                      {"fuse_triggered", r.fuse_triggered}};
  return j;
}

nlohmann::json summary_json(const RecoveryReport& r) {
  return {{"type", "summary"},
          {"config", to_json(r.config)},
          {"direction_layer", r.direction_layer},
          {"branch", to_string(r.branch)},
          {"epochs_run", r.epochs.size()},
          {"warmup_drop_pp", r.warmup_drop},
          {"final_drop_pp", r.final_drop},
          {"drop_measure", "absolute percentage points"},
          {"fuse_triggered", r.fuse_triggered},
          {"modified_vs_finetuned", r.modified_vs_finetuned},
          {"differing_vs_original", r.differing_vs_original},
          {"final_cosine", r.final_cosine}};
}

std::string to_json_lines(const RecoveryReport& r) {
  std::ostringstream os;
  for (const auto& e : r.epochs) os << to_json(e).dump() << '\n';
  os << summary_json(r).dump() << '\n';
  return os.str();
}

}  // namespace realign
