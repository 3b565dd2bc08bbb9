#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "realign/graph.hpp"
#include "realign/tensor.hpp"

namespace realign {

using Tokens = std::vector<int>;

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 6;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq = 32;
  std::uint64_t seed = 0;

  /// Throws ContractError unless every field is usable.
  void validate() const;

  /// Equal architecture; the seed is not part of the layout.
  bool same_layout(const ModelConfig& other) const;

  bool operator==(const ModelConfig&) const = default;
};

/// Which part of the network a parameter belongs to. Blocks are numbered
/// 1..n_layers; embeddings sit at 0 and the output stage at n_layers + 1.
struct ParamInfo {
  std::string name;
  int block = 0;
  Index offset = 0;  // first flat index
};

/// Tiny pre-norm decoder-only transformer with learned positional
/// embeddings.
///
/// Parameters are kept in a fixed order (token and position embeddings,
/// blocks 1..L, final norm and prediction head), and the flat index
/// concatenates them in that order. Since block number never decreases
/// along the flat index, the parameters of "embedding plus blocks 1..k" form
/// the prefix [0, prefix_end(k)).
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  std::size_t param_count() const { return params_.size(); }
  const ParamInfo& info(std::size_t i) const { return info_.at(i); }
  const Tensorf& param(std::size_t i) const { return params_.at(i); }
  Tensorf& param(std::size_t i) { return params_.at(i); }
  std::size_t param_index(const std::string& name) const;
  const Tensorf& param(const std::string& name) const { return params_[param_index(name)]; }
  Tensorf& param(const std::string& name) { return params_[param_index(name)]; }

  /// Total number of scalar parameters.
  Index flat_size() const { return flat_size_; }
  float flat(Index k) const;
  void set_flat(Index k, float v);
  /// Parameter and in-tensor offset of flat index k.
  std::pair<std::size_t, Index> locate(Index k) const;
  int block_of(Index k) const { return info_[locate(k).first].block; }
  /// One past the last flat index of blocks 0..block.
  Index prefix_end(int block) const;

  std::vector<float> flatten() const;
  void assign_flat(std::span<const float> values);

 private:
  void add_param(std::string name, int block, Shape shape);

  ModelConfig config_;
  std::vector<ParamInfo> info_;
  std::vector<Tensorf> params_;
  Index flat_size_ = 0;
};

/// Parameters of a model registered as leaves of a graph.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<Var<float>> params;
};

/// Registers every parameter in `g`. Parameters whose flat range lies
/// inside [0, grad_prefix) require gradients; pass flat_size() for all.
BoundModel bind(Graph<float>& g, const Model& model, Index grad_prefix);

/// Shift added to the last position's hidden state after a given block.
struct HiddenShift {
  int layer = 0;
  RowMatrix<float> shift;  // 1 x d_model
};

struct TraceOptions {
  /// Stop after this block (no logits). 0 runs the whole network.
  int stop_after = 0;
  std::optional<HiddenShift> shift;
};

struct Trace {
  /// hidden[0] is the embedding output; hidden[i] the output of block i.
  std::vector<Var<float>> hidden;
  std::optional<Var<float>> logits;
};

Trace trace(const BoundModel& bound, std::span<const int> tokens, const TraceOptions& options = {});

struct ForwardOutput {
  RowMatrix<float> logits;               // len x vocab
  std::vector<RowMatrix<float>> hidden;  // hidden[0..L], each len x d_model
};

ForwardOutput forward(const Model& model, std::span<const int> tokens, const TraceOptions& options = {});

/// Row of the final position of hidden state `layer` (1..L).
RowMatrix<float> hidden_last_token(const Model& model, std::span<const int> tokens, int layer);

/// Greedy continuation of `prompt`; ties go to the lowest token id. Stops
/// after emitting `eos` (which is included), after `max_new` tokens, or when
/// the context is full.
Tokens generate(const Model& model, std::span<const int> prompt, int max_new, std::optional<int> eos);

/// Prompt/answer pair for supervised training.
struct Example {
  Tokens prompt;
  Tokens answer;
};

/// Input sequence and masked targets for an example: the model reads
/// prompt + answer[:-1] and only answer positions carry a target.
std::pair<Tokens, std::vector<int>> teacher_forcing(const Example& ex);

/// Mean per-example answer cross-entropy, without updating anything.
float example_loss(const Model& model, const Example& ex);

/// One plain SGD step on the batch mean of per-example answer losses.
/// Returns the loss before the update. Throws NumericError (model left
/// untouched) if the loss or a gradient is not finite.
float train_step(Model& model, std::span<const Example> batch, float lr);

/// Binary checkpoint: "RLGNCKPT", u32 version, length-prefixed config,
/// u64 float count, parameter blob in flat order, u64 FNV-1a of the blob.
/// All little-endian.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize(const Model& model);
Model deserialize(std::span<const std::uint8_t> bytes);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

/// Flat indices whose values differ bitwise, ascending.
std::vector<Index> weight_diff(const Model& a, const Model& b);

}  // namespace realign
