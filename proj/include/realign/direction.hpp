#pragma once

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <vector>

#include "realign/model.hpp"

namespace realign {

enum class DirectionSource { kHarmful, kAligned };

std::string to_string(DirectionSource s);
DirectionSource direction_source_from_string(const std::string& s);

/// Mean last-token hidden state at one layer over a prompt set.
struct Direction {
  int layer = 0;
  RowMatrix<float> vector;  // 1 x d_model
  DirectionSource source = DirectionSource::kHarmful;
  std::size_t n_prompts = 0;
};

/// Default direction layer: ceil(2L/3).
inline int default_direction_layer(int n_layers) { return (2 * n_layers + 2) / 3; }

/// Differentiable direction: mean over prompts (in the given order) of the
/// final-position row of hidden state `layer`. Only blocks 1..layer run.
Var<float> trace_direction(const BoundModel& bound, std::span<const Tokens> prompts, int layer);

/// Throws ContractError on an empty prompt set and DegenerateDirectionError
/// if the mean has zero norm.
Direction extract_direction(const Model& model, std::span<const Tokens> prompts, int layer, DirectionSource source);

/// Shift of the last position after `layer`: alpha * aligned - beta * harmful.
struct SteeringSpec {
  float alpha = 1.0f;
  float beta = 1.0f;
  Direction aligned;
  Direction harmful;
};

/// Steered forward pass; returns logits (len x vocab).
RowMatrix<float> steer(const Model& model, std::span<const int> tokens, const SteeringSpec& spec);

/// Greedy continuation under steering (the shift is reapplied at every step
/// to whichever position is last).
Tokens steer_generate(const Model& model, std::span<const int> prompt, const SteeringSpec& spec, int max_new,
                      std::optional<int> eos);

/// -cos(target, current).
float direction_loss(const Direction& target, const Direction& current);
Var<float> direction_loss(const Direction& target, Var<float> current);

/// Pairwise cosine similarity of directions (all at the same layer).
RowMatrix<float> similarity_matrix(std::span<const Direction> directions);

/// Extracts one direction per model (model i reads prompt_sets[i], or the
/// single set when only one is given) and tabulates pairwise cosines.
RowMatrix<float> direction_similarity_report(std::span<const Model* const> models,
                                             std::span<const std::vector<Tokens>> prompt_sets, int layer,
                                             DirectionSource source);

nlohmann::json to_json(const Direction& d);
Direction direction_from_json(const nlohmann::json& j);

}  // namespace realign
