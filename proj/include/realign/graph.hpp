#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "realign/errors.hpp"
#include "realign/tensor.hpp"

namespace realign {

enum class OpKind {
  kLeaf,
  kMatMul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kTanh,
  kGelu,
  kSoftmax,
  kLayerNorm,
  kEmbedding,
  kMeanRows,
  kSum,
  kCosine,
  kCrossEntropy,
  kSliceCols,
  kConcatCols,
  kConcatRows,
  kRow,
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  std::size_t id = 0;

  const RowMatrix<Scalar>& value() const { return graph->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Define-by-run reverse-mode autodiff tape.
///
/// Every op evaluates eagerly when it is appended, so nodes are stored in a
/// valid topological order by construction. Reductions run sequentially in
/// index order; repeated construction from identical inputs is bit-identical.
/// A Graph is not thread-safe, but distinct graphs share no state.
template <typename Scalar>
class Graph {
 public:
  using Matrix = RowMatrix<Scalar>;
  using NodeId = std::size_t;
  using Backward = std::function<void(Graph&, NodeId)>;

  struct Node {
    OpKind op;
    std::vector<NodeId> inputs;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> leaf(const Tensor<Scalar>& t, bool requires_grad) { return leaf(t.matrix(), requires_grad); }

  Var<Scalar> leaf(Matrix value, bool requires_grad) {
    check_finite(value, "leaf");
    Node n{OpKind::kLeaf, {}, std::move(value), {}, requires_grad, {}};
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<Scalar> constant(Matrix value) { return leaf(std::move(value), false); }

  /// Appends an op node. `backward` reads this node's grad and accumulates
  /// into the grads of those inputs that require one.
  Var<Scalar> push(OpKind op, std::vector<NodeId> inputs, Matrix value, const char* name, Backward backward) {
    check_finite(value, name);
    bool rg = false;
    for (NodeId i : inputs) rg = rg || nodes_.at(i).requires_grad;
    Node n{op, std::move(inputs), std::move(value), {}, rg, rg ? std::move(backward) : Backward{}};
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Designated-output evaluation: the graph is eager, so this reads the value.
  Tensor<Scalar> evaluate(Var<Scalar> out) const { return Tensor<Scalar>::from_matrix(value(out.id)); }

  /// Gradient of the most recent backward() pass. Zero for leaves that the
  /// loss does not reach.
  const Matrix& grad(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (!n.requires_grad) throw ContractError("graph: node does not require grad");
    return n.grad;
  }
  const Matrix& grad(Var<Scalar> v) const { return grad(v.id); }

  Matrix& grad_mut(NodeId id) { return nodes_[id].grad; }
  bool needs_grad(NodeId id) const { return nodes_[id].requires_grad; }

  void backward(Var<Scalar> loss) {
    const Node& ln = nodes_.at(loss.id);
    if (ln.value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + std::to_string(ln.value.rows()) + "x" +
                          std::to_string(ln.value.cols()));
    }
    for (Node& n : nodes_) {
      if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
    if (!ln.requires_grad) return;
    nodes_[loss.id].grad(0, 0) = Scalar(1);
    for (NodeId i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
    for (const Node& n : nodes_) {
      if (n.requires_grad && n.op == OpKind::kLeaf && !n.grad.allFinite()) {
        throw NumericError("backward: non-finite gradient");
      }
    }
  }

 private:
  static void check_finite(const Matrix& m, const char* name) {
    if (!m.allFinite()) throw NumericError(std::string(name) + ": non-finite value");
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
Graph<Scalar>& same_graph(Var<Scalar> a, Var<Scalar> b) {
  if (a.graph != b.graph || a.graph == nullptr) throw ContractError("operands belong to different graphs");
  return *a.graph;
}

inline std::string dims(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

template <typename M>
void require_same_shape(const M& a, const M& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + dims(a.rows(), a.cols()) + " vs " +
                         dims(b.rows(), b.cols()));
  }
}

// Column sums accumulated top to bottom.
template <typename M>
RowMatrix<typename M::Scalar> column_sums(const M& m) {
  RowMatrix<typename M::Scalar> out = RowMatrix<typename M::Scalar>::Zero(1, m.cols());
  for (Index r = 0; r < m.rows(); ++r) out.row(0) += m.row(r);
  return out;
}

template <typename Scalar>
Scalar sequential_sum(const RowMatrix<Scalar>& m) {
  Scalar s = 0;
  const Scalar* p = m.data();
  for (Index i = 0; i < m.size(); ++i) s += p[i];
  return s;
}

}  // namespace detail

/// (n x k) * (k x m).
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: " + detail::dims(av.rows(), av.cols()) + " * " + detail::dims(bv.rows(), bv.cols()));
  }
  RowMatrix<Scalar> out = av * bv;
  return g.push(OpKind::kMatMul, {a.id, b.id}, std::move(out), "matmul", [a = a.id, b = b.id](Graph<Scalar>& gr, std::size_t self) {
    const auto& go = gr.node(self).grad;
    if (gr.needs_grad(a)) gr.grad_mut(a).noalias() += go * gr.value(b).transpose();
    if (gr.needs_grad(b)) gr.grad_mut(b).noalias() += gr.value(a).transpose() * go;
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  RowMatrix<Scalar> out = a.value().transpose();
  return a.graph->push(OpKind::kTranspose, {a.id}, std::move(out), "transpose", [a = a.id](Graph<Scalar>& gr, std::size_t self) {
    gr.grad_mut(a) += gr.node(self).grad.transpose();
  });
}

/// Elementwise a + b. `b` may also be a single row broadcast over a's rows.
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool broadcast = bv.rows() == 1 && av.rows() != 1 && bv.cols() == av.cols();
  if (!broadcast) detail::require_same_shape(av, bv, "add");
  RowMatrix<Scalar> out = av;
  if (broadcast) {
    out.rowwise() += bv.row(0);
  } else {
    out += bv;
  }
  return g.push(OpKind::kAdd, {a.id, b.id}, std::move(out), "add", [a = a.id, b = b.id, broadcast](Graph<Scalar>& gr, std::size_t self) {
    const auto& go = gr.node(self).grad;
    if (gr.needs_grad(a)) gr.grad_mut(a) += go;
    if (gr.needs_grad(b)) {
      if (broadcast) {
        gr.grad_mut(b) += detail::column_sums(go);
      } else {
        gr.grad_mut(b) += go;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape(a.value(), b.value(), "sub");
  RowMatrix<Scalar> out = a.value() - b.value();
  return g.push(OpKind::kSub, {a.id, b.id}, std::move(out), "sub", [a = a.id, b = b.id](Graph<Scalar>& gr, std::size_t self) {
    const auto& go = gr.node(self).grad;
    if (gr.needs_grad(a)) gr.grad_mut(a) += go;
    if (gr.needs_grad(b)) gr.grad_mut(b) -= go;
  });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  RowMatrix<Scalar> out = a.value().cwiseProduct(b.value());
  return g.push(OpKind::kMul, {a.id, b.id}, std::move(out), "mul", [a = a.id, b = b.id](Graph<Scalar>& gr, std::size_t self) {
    const auto& go = gr.node(self).grad;
    if (gr.needs_grad(a)) gr.grad_mut(a) += go.cwiseProduct(gr.value(b));
    if (gr.needs_grad(b)) gr.grad_mut(b) += go.cwiseProduct(gr.value(a));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  RowMatrix<Scalar> out = a.value() * s;
  return a.graph->push(OpKind::kScale, {a.id}, std::move(out), "scale", [a = a.id, s](Graph<Scalar>& gr, std::size_t self) {
    gr.grad_mut(a) += gr.node(self).grad * s;
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  RowMatrix<Scalar> out = a.value().array().tanh().matrix();
  return a.graph->push(OpKind::kTanh, {a.id}, std::move(out), "tanh", [a = a.id](Graph<Scalar>& gr, std::size_t self) {
    const auto& y = gr.value(self);
    gr.grad_mut(a).array() += gr.node(self).grad.array() * (Scalar(1) - y.array().square());
  });
}

/// GELU, tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  const Scalar c = Scalar(std::sqrt(2.0 / 3.14159265358979323846));
  const Scalar k = Scalar(0.044715);
  const auto& x = a.value().array();
  RowMatrix<Scalar> t = (c * (x + k * x.cube())).tanh().matrix();
  RowMatrix<Scalar> out = (Scalar(0.5) * x * (Scalar(1) + t.array())).matrix();
  return a.graph->push(OpKind::kGelu, {a.id}, std::move(out), "gelu", [a = a.id, t = std::move(t), c, k](Graph<Scalar>& gr, std::size_t self) {
    const auto& xv = gr.value(a).array();
    const auto ta = t.array();
    auto dy = Scalar(0.5) * (Scalar(1) + ta) +
              Scalar(0.5) * xv * (Scalar(1) - ta.square()) * c * (Scalar(1) + Scalar(3) * k * xv.square());
    gr.grad_mut(a).array() += gr.node(self).grad.array() * dy;
  });
}

/// Row-wise softmax. With `causal`, row i only spans columns 0..i and the
/// remaining entries are exactly zero.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> a, bool causal = false) {
  const auto& x = a.value();
  if (causal && x.rows() > x.cols()) throw DimensionError("softmax: causal mask needs cols >= rows");
  RowMatrix<Scalar> y = RowMatrix<Scalar>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Index n = causal ? r + 1 : x.cols();
    Scalar mx = x(r, 0);
    for (Index j = 1; j < n; ++j) mx = std::max(mx, x(r, j));
    Scalar denom = 0;
    for (Index j = 0; j < n; ++j) {
      y(r, j) = std::exp(x(r, j) - mx);
      denom += y(r, j);
    }
    for (Index j = 0; j < n; ++j) y(r, j) /= denom;
  }
  return a.graph->push(OpKind::kSoftmax, {a.id}, std::move(y), "softmax", [a = a.id](Graph<Scalar>& gr, std::size_t self) {
    const auto& yv = gr.value(self);
    const auto& go = gr.node(self).grad;
    auto& ga = gr.grad_mut(a);
    for (Index r = 0; r < yv.rows(); ++r) {
      Scalar dot = 0;
      for (Index j = 0; j < yv.cols(); ++j) dot += go(r, j) * yv(r, j);
      for (Index j = 0; j < yv.cols(); ++j) ga(r, j) += yv(r, j) * (go(r, j) - dot);
    }
  });
}

/// Row-wise layer normalization with affine gain and bias (both 1 x d).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias) {
  auto& g = detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  const auto& xv = x.value();
  const Index d = xv.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  }
  RowMatrix<Scalar> xhat(xv.rows(), d);
  std::vector<Scalar> rstd(static_cast<std::size_t>(xv.rows()));
  for (Index r = 0; r < xv.rows(); ++r) {
    Scalar mean = 0;
    for (Index j = 0; j < d; ++j) mean += xv(r, j);
    mean /= Scalar(d);
    Scalar var = 0;
    for (Index j = 0; j < d; ++j) var += (xv(r, j) - mean) * (xv(r, j) - mean);
    var /= Scalar(d);
    const Scalar rs = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    rstd[static_cast<std::size_t>(r)] = rs;
    for (Index j = 0; j < d; ++j) xhat(r, j) = (xv(r, j) - mean) * rs;
  }
  RowMatrix<Scalar> out = xhat;
  for (Index r = 0; r < out.rows(); ++r) {
    out.row(r) = out.row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
  }
  return g.push(OpKind::kLayerNorm, {x.id, gain.id, bias.id}, std::move(out), "layer_norm",
                [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<Scalar>& gr, std::size_t self) {
                  const auto& go = gr.node(self).grad;
                  const auto& gamma = gr.value(gi);
                  const Index d = go.cols();
                  if (gr.needs_grad(gi)) gr.grad_mut(gi) += detail::column_sums(RowMatrix<Scalar>(go.cwiseProduct(xhat)));
                  if (gr.needs_grad(bi)) gr.grad_mut(bi) += detail::column_sums(go);
                  if (!gr.needs_grad(xi)) return;
                  auto& gx = gr.grad_mut(xi);
                  for (Index r = 0; r < go.rows(); ++r) {
                    Scalar mean_g = 0, mean_gx = 0;
                    for (Index j = 0; j < d; ++j) {
                      const Scalar gh = go(r, j) * gamma(0, j);
                      mean_g += gh;
                      mean_gx += gh * xhat(r, j);
                    }
                    mean_g /= Scalar(d);
                    mean_gx /= Scalar(d);
                    const Scalar rs = rstd[static_cast<std::size_t>(r)];
                    for (Index j = 0; j < d; ++j) {
                      gx(r, j) += rs * (go(r, j) * gamma(0, j) - mean_g - xhat(r, j) * mean_gx);
                    }
                  }
                });
}

/// Gathers rows of `table` by id.
template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, std::span<const int> ids) {
  const auto& tv = table.value();
  RowMatrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  return table.graph->push(OpKind::kEmbedding, {table.id}, std::move(out), "embedding",
                           [t = table.id, idv = std::vector<int>(ids.begin(), ids.end())](Graph<Scalar>& gr, std::size_t self) {
                             const auto& go = gr.node(self).grad;
                             auto& gt = gr.grad_mut(t);
                             for (std::size_t i = 0; i < idv.size(); ++i) gt.row(idv[i]) += go.row(static_cast<Index>(i));
                           });
}

/// Mean over axis 0: (n x d) -> (1 x d), rows summed in order.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  const auto& av = a.value();
  if (av.rows() == 0) throw DimensionError("mean_rows: no rows");
  RowMatrix<Scalar> out = detail::column_sums(av) / Scalar(av.rows());
  return a.graph->push(OpKind::kMeanRows, {a.id}, std::move(out), "mean_rows", [a = a.id](Graph<Scalar>& gr, std::size_t self) {
    auto& ga = gr.grad_mut(a);
    const auto row = (gr.node(self).grad / Scalar(ga.rows())).eval();
    for (Index r = 0; r < ga.rows(); ++r) ga.row(r) += row.row(0);
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = detail::sequential_sum(a.value());
  return a.graph->push(OpKind::kSum, {a.id}, std::move(out), "sum", [a = a.id](Graph<Scalar>& gr, std::size_t self) {
    gr.grad_mut(a).array() += gr.node(self).grad(0, 0);
  });
}

/// Cosine similarity of two equally sized operands, flattened. The value is
/// clamped to [-1, 1]; the gradient is that of the unclamped quotient.
template <typename Scalar>
Var<Scalar> cosine_similarity(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.size() != bv.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(av.size()) + " and " + std::to_string(bv.size()));
  }
  Scalar dot = 0, aa = 0, bb = 0;
  for (Index i = 0; i < av.size(); ++i) {
    dot += av.data()[i] * bv.data()[i];
    aa += av.data()[i] * av.data()[i];
    bb += bv.data()[i] * bv.data()[i];
  }
  if (!(aa > 0) || !(bb > 0)) throw DegenerateDirectionError("cosine_similarity: zero-norm operand");
  const Scalar na = std::sqrt(aa), nb = std::sqrt(bb);
  const Scalar c = dot / (na * nb);
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = std::clamp(c, Scalar(-1), Scalar(1));
  return g.push(OpKind::kCosine, {a.id, b.id}, std::move(out), "cosine_similarity",
                [ai = a.id, bi = b.id, na, nb, aa, bb, c](Graph<Scalar>& gr, std::size_t self) {
                  const Scalar go = gr.node(self).grad(0, 0);
                  const auto& av = gr.value(ai);
                  const auto& bv = gr.value(bi);
                  if (gr.needs_grad(ai)) {
                    auto& ga = gr.grad_mut(ai);
                    for (Index i = 0; i < av.size(); ++i) {
                      ga.data()[i] += go * (bv.data()[i] / (na * nb) - c * av.data()[i] / aa);
                    }
                  }
                  if (gr.needs_grad(bi)) {
                    auto& gb = gr.grad_mut(bi);
                    for (Index i = 0; i < bv.size(); ++i) {
                      gb.data()[i] += go * (av.data()[i] / (na * nb) - c * bv.data()[i] / bb);
                    }
                  }
                });
}

/// Mean token cross-entropy of row-wise logits. Rows whose target is negative
/// are masked out; at least one row must be counted.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets) {
  const auto& lv = logits.value();
  if (static_cast<Index>(targets.size()) != lv.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(lv.rows()) + " rows");
  }
  RowMatrix<Scalar> probs = RowMatrix<Scalar>::Zero(lv.rows(), lv.cols());
  Scalar total = 0;
  Index counted = 0;
  for (Index r = 0; r < lv.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    if (t >= lv.cols()) throw DimensionError("cross_entropy: target " + std::to_string(t) + " out of range");
    Scalar mx = lv(r, 0);
    for (Index j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(r, j));
    Scalar denom = 0;
    for (Index j = 0; j < lv.cols(); ++j) {
      probs(r, j) = std::exp(lv(r, j) - mx);
      denom += probs(r, j);
    }
    probs.row(r) /= denom;
    total += -(lv(r, t) - mx - std::log(denom));
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every target is masked");
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = total / Scalar(counted);
  return logits.graph->push(OpKind::kCrossEntropy, {logits.id}, std::move(out), "cross_entropy",
                            [li = logits.id, probs = std::move(probs), tv = std::vector<int>(targets.begin(), targets.end()), counted](
                                Graph<Scalar>& gr, std::size_t self) {
                              const Scalar go = gr.node(self).grad(0, 0) / Scalar(counted);
                              auto& gl = gr.grad_mut(li);
                              for (Index r = 0; r < gl.rows(); ++r) {
                                const int t = tv[static_cast<std::size_t>(r)];
                                if (t < 0) continue;
                                gl.row(r) += go * probs.row(r);
                                gl(r, t) -= go;
                              }
                            });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Index start, Index len) {
  const auto& av = a.value();
  if (start < 0 || len < 0 || start + len > av.cols()) throw DimensionError("slice_cols: range outside operand");
  RowMatrix<Scalar> out = av.middleCols(start, len);
  return a.graph->push(OpKind::kSliceCols, {a.id}, std::move(out), "slice_cols", [a = a.id, start, len](Graph<Scalar>& gr, std::size_t self) {
    gr.grad_mut(a).middleCols(start, len) += gr.node(self).grad;
  });
}

template <typename Scalar>
Var<Scalar> row(Var<Scalar> a, Index r) {
  const auto& av = a.value();
  if (r < 0 || r >= av.rows()) throw DimensionError("row: index " + std::to_string(r) + " out of range");
  RowMatrix<Scalar> out = av.row(r);
  return a.graph->push(OpKind::kRow, {a.id}, std::move(out), "row", [a = a.id, r](Graph<Scalar>& gr, std::size_t self) {
    gr.grad_mut(a).row(r) += gr.node(self).grad.row(0);
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
  Index cols = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::same_graph(parts[0], p);
    if (p.rows() != parts[0].rows()) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
  }
  RowMatrix<Scalar> out(parts[0].rows(), cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts[0].graph->push(OpKind::kConcatCols, ids, std::move(out), "concat_cols", [ids](Graph<Scalar>& gr, std::size_t self) {
    const auto& go = gr.node(self).grad;
    Index at = 0;
    for (std::size_t id : ids) {
      const Index w = gr.value(id).cols();
      if (gr.needs_grad(id)) gr.grad_mut(id) += go.middleCols(at, w);
      at += w;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
  Index rows = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::same_graph(parts[0], p);
    if (p.cols() != parts[0].cols()) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    ids.push_back(p.id);
  }
  RowMatrix<Scalar> out(rows, parts[0].cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts[0].graph->push(OpKind::kConcatRows, ids, std::move(out), "concat_rows", [ids](Graph<Scalar>& gr, std::size_t self) {
    const auto& go = gr.node(self).grad;
    Index at = 0;
    for (std::size_t id : ids) {
      const Index h = gr.value(id).rows();
      if (gr.needs_grad(id)) gr.grad_mut(id) += go.middleRows(at, h);
      at += h;
    }
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return mul(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a) { return scale(a, Scalar(-1)); }

/// Cosine similarity of two plain vectors, outside any graph.
template <typename Scalar>
Scalar cosine(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  Graph<Scalar> g;
  auto va = g.constant(a);
  auto vb = g.constant(b);
  return cosine_similarity(va, vb).value()(0, 0);
}

}  // namespace realign
