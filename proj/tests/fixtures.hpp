#pragma once

#include <algorithm>
#include <bit>
#include <numeric>
#include <cstdint>
#include <vector>

#include "realign/direction.hpp"
#include "realign/model.hpp"
#include "realign/random.hpp"
#include "realign/recovery.hpp"

namespace realign::testing {

inline ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 10;
  c.seed = seed;
  return c;
}

inline std::vector<Tokens> random_prompts(int n, int vocab, std::uint64_t seed, int max_len = 6) {
  Rng rng(seed);
  std::vector<Tokens> out;
  for (int i = 0; i < n; ++i) {
    Tokens t(static_cast<std::size_t>(rng.range(1, max_len)));
    for (int& x : t) x = rng.range(0, vocab - 1);
    out.push_back(t);
  }
  return out;
}

/// Copy of `m` with Gaussian noise of scale `sigma` added to every scalar.
inline Model perturbed(const Model& m, double sigma, std::uint64_t seed) {
  Model out = m;
  Rng rng(seed);
  std::vector<float> v = out.flatten();
  for (float& x : v) x += static_cast<float>(sigma * rng.normal());
  out.assign_flat(v);
  return out;
}

/// Gradient of -cos(target, direction of `m`) for every flat index, from a
/// graph where all parameters require grad.
inline std::vector<float> full_direction_gradient(const Model& m, std::span<const Tokens> prompts,
                                                  const Direction& target) {
  Graph<float> g;
  BoundModel b = bind(g, m, m.flat_size());
  Var<float> loss = direction_loss(target, trace_direction(b, prompts, target.layer));
  g.backward(loss);
  std::vector<float> out;
  for (std::size_t i = 0; i < m.param_count(); ++i) {
    const auto& gm = g.grad(b.params[i]);
    out.insert(out.end(), gm.data(), gm.data() + gm.size());
  }
  return out;
}

/// Filter, sort, take: every eligible index whose gradient and delta share a
/// nonzero sign, ordered by |grad| descending then index, first
/// ceil(permille * n / 1000) kept. Returned ascending.
inline std::vector<Index> brute_force_selection(const Model& target, const Model& current,
                                                std::span<const float> grad, int layer, int permille,
                                                std::size_t* n_candidates = nullptr) {
  struct Cand {
    float g;
    Index k;
  };
  std::vector<Cand> cands;
  for (Index k = 0; k < current.flat_size(); ++k) {
    if (current.block_of(k) > layer) continue;
    const double g = grad[static_cast<std::size_t>(k)];
    const double d = static_cast<double>(current.flat(k)) - static_cast<double>(target.flat(k));
    if ((g > 0 && d > 0) || (g < 0 && d < 0)) cands.push_back({std::abs(grad[static_cast<std::size_t>(k)]), k});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return a.g != b.g ? a.g > b.g : a.k < b.k;
  });
  const std::size_t n = cands.size();
  const std::size_t take = (static_cast<std::size_t>(permille) * n + 999) / 1000;
  std::vector<Index> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(cands[i].k);
  std::sort(out.begin(), out.end());
  if (n_candidates) *n_candidates = n;
  return out;
}

struct SelectionTrial {
  bool selection_matches = false;
  bool others_untouched = false;
  int perturbed = 0;
  std::size_t candidates = 0;
  std::size_t restored = 0;
};

/// One randomized reset step: a target model, a copy with 10..100 eligible
/// scalars (and a few ineligible ones) moved, a random layer and rate. The
/// step must select exactly the brute-force set and copy only those values.
inline SelectionTrial selection_trial(std::uint64_t seed) {
  Rng rng(seed);
  const ModelConfig c = tiny_config(seed);
  const Model target(c);
  Model current = target;
  const int layer = rng.range(1, c.n_layers);
  const Index eligible = current.prefix_end(layer);

  SelectionTrial out;
  out.perturbed = rng.range(10, 100);
  std::vector<Index> order(static_cast<std::size_t>(eligible));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order);
  for (int i = 0; i < out.perturbed; ++i) {
    const Index k = order[static_cast<std::size_t>(i)];
    current.set_flat(k, current.flat(k) + static_cast<float>(0.05 * rng.normal()));
  }
  for (int i = rng.range(0, 5); i > 0; --i) {
    const Index k = eligible + static_cast<Index>(rng.below(static_cast<std::uint64_t>(current.flat_size() - eligible)));
    current.set_flat(k, current.flat(k) + 0.5f);
  }

  const auto prompts = random_prompts(rng.range(1, 4), c.vocab_size, seed ^ 0xabcdu);
  const Direction delta = extract_direction(target, prompts, layer, DirectionSource::kHarmful);
  const int permille = rng.range(1, 1000);

  const auto grad = full_direction_gradient(current, prompts, delta);
  const auto oracle = brute_force_selection(target, current, grad, layer, permille, &out.candidates);

  Model after = current;
  const ResetStep step = reset_weights(target, after, prompts, delta, permille / 1000.0);
  out.restored = step.restored.size();
  out.selection_matches = step.restored == oracle && step.candidates.indices.size() == out.candidates;

  Model expected = current;
  for (Index k : oracle) expected.set_flat(k, target.flat(k));
  out.others_untouched = weight_diff(after, expected).empty();
  return out;
}

/// True when every scalar of `m` equals the scalar of `a` or of `b`.
inline bool values_from_either(const Model& m, const Model& a, const Model& b) {
  const auto vm = m.flatten(), va = a.flatten(), vb = b.flatten();
  for (std::size_t i = 0; i < vm.size(); ++i) {
    const auto x = std::bit_cast<std::uint32_t>(vm[i]);
    if (x != std::bit_cast<std::uint32_t>(va[i]) && x != std::bit_cast<std::uint32_t>(vb[i])) return false;
  }
  return true;
}

}  // namespace realign::testing
