#pragma once

#include <nlohmann/json.hpp>

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "realign/direction.hpp"
#include "realign/model.hpp"

namespace realign {

enum class Scenario { kI, kII };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct RecoveryConfig {
  double recovery_rate = 0.002;  // P, fraction of sign-filtered candidates restored per epoch
  double rollback_rate = 0.20;   // R
  int epochs = 20;               // E
  int warmup = 5;
  double fuse_threshold = 5.0;   // percentage points
  int direction_layer = 0;       // 0 selects ceil(2L/3)
  Scenario scenario = Scenario::kII;

  void validate() const;
  int layer_for(const ModelConfig& c) const;
};

/// Sign-filtered candidates of one reset step. Indices ascend.
struct CandidateSet {
  std::vector<Index> indices;
  std::vector<float> abs_grad;
};

/// ceil(fraction * n); the product is nudged down by 1e-9 so that exact
/// decimal products such as 0.002 * 500 do not round up to the next integer.
std::size_t selection_budget(double fraction, std::size_t n);

/// Indices i in [0, grad.size()) with grad[i] * (current[i] - target[i]) > 0.
CandidateSet sign_filter(std::span<const float> grad, std::span<const float> current, std::span<const float> target);

/// Top ceil(fraction * |candidates|) by |grad|, larger first and lower flat
/// index on ties. Returned ascending.
std::vector<Index> select_top(const CandidateSet& candidates, double fraction);

struct ResetStep {
  float loss = 0.0f;  // -cos(delta_target, current direction) before the step
  CandidateSet candidates;
  std::vector<Index> restored;  // ascending
};

/// One greedy restoration step: extracts the current direction at the
/// target's layer, backpropagates -cos(target, current) into the embeddings
/// and blocks 1..layer, keeps the weights whose gradient step would move
/// them toward `target`, and copies the top `fraction` of those (by |grad|)
/// from `target` into `current`. Everything else stays bit-identical.
ResetStep reset_weights(const Model& target, Model& current, std::span<const Tokens> prompts,
                        const Direction& delta_target, double fraction);

/// Task-performance drop of a model, in percentage points.
using PerformanceDrop = std::function<double(const Model&)>;

/// Scenario I: the owner cannot measure the task, so the drop is always 0.
PerformanceDrop zero_drop();

/// baseline_tp - metric(model). Throws ContractError unless baseline_tp is in [0, 100].
double performance_drop(const Model& model, const std::function<double(const Model&)>& metric, double baseline_tp);

enum class Phase { kWarmup, kContinue, kRollback };
std::string to_string(Phase p);

struct EpochRecord {
  Phase phase = Phase::kWarmup;
  int epoch = 0;  // 1-based within the phase
  float loss = 0.0f;
  float cosine_before = 0.0f;
  float cosine_after = 0.0f;  // cos(delta_harmful, current) right after the restore step
  std::size_t candidates = 0;
  std::size_t restored = 0;
  std::size_t rollback_candidates = 0;
  std::size_t rolled_back = 0;
  double drop = 0.0;
  bool fuse_triggered = false;
  /// Only filled when the caller asks for a trace.
  std::vector<Index> restored_indices;
  std::vector<Index> rolled_back_indices;
  std::vector<Index> differing_before_rollback;
};

enum class Branch { kRollbackFree, kRollback };
std::string to_string(Branch b);

struct RecoveryReport {
  RecoveryConfig config;
  int direction_layer = 0;
  std::vector<EpochRecord> epochs;
  double warmup_drop = 0.0;
  double final_drop = 0.0;
  Branch branch = Branch::kRollbackFree;
  bool fuse_triggered = false;
  std::size_t modified_vs_finetuned = 0;
  std::size_t differing_vs_original = 0;
  float final_cosine = 0.0f;
};

/// Inputs shared by every epoch.
struct RecoveryContext {
  const Model* original = nullptr;
  const Model* finetuned = nullptr;
  std::span<const Tokens> recovery_prompts;
  std::span<const Tokens> rollback_prompts;
  Direction delta_harmful;
  Direction delta_aligned;
  PerformanceDrop drop;
  RecoveryConfig config;
  bool keep_indices = false;
};

/// `rounds` epochs starting from `start`. Each epoch restores toward the
/// original using delta_harmful at rate P, optionally rolls back toward the
/// fine-tuned model using delta_aligned at rate R, and, with `fuse`, returns
/// the previous epoch's model once the drop exceeds the threshold.
Model recovery(const RecoveryContext& ctx, const Model& start, int rounds, bool rollback, bool fuse, Phase phase,
               std::vector<EpochRecord>& log);

/// Warm-up then either continue rollback-free from the warm-up model, or
/// restart from the fine-tuned model with rollback enabled.
std::pair<Model, RecoveryReport> recover(const Model& original, const Model& finetuned,
                                         std::span<const Tokens> recovery_prompts,
                                         std::span<const Tokens> rollback_prompts, const RecoveryConfig& config,
                                         const PerformanceDrop& drop, bool keep_indices = false);

nlohmann::json to_json(const RecoveryConfig& c);
RecoveryConfig recovery_config_from_json(const nlohmann::json& j, RecoveryConfig base = {});
nlohmann::json to_json(const EpochRecord& r);
nlohmann::json summary_json(const RecoveryReport& r);
/// One JSON object per line: every epoch, then the summary.
std::string to_json_lines(const RecoveryReport& r);

}  // namespace realign
