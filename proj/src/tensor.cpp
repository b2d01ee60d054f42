#include "mope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "mope/errors.hpp"

namespace mope {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Tensor::Tensor() : shape_{1}, data_(std::make_shared<const std::vector<float>>(1, 0.0f)) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
  if (shape_.empty()) throw ShapeError("tensor: empty shape");
  for (int d : shape_) {
    if (d < 0) throw ShapeError("tensor: negative dimension in " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  data_ = std::make_shared<const std::vector<float>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0f); }

Tensor Tensor::filled(Shape shape, float value) {
  std::vector<float> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

int Tensor::rows() const {
  const int c = cols();
  return c == 0 ? 0 : static_cast<int>(size() / static_cast<std::size_t>(c));
}

bool Tensor::all_finite() const {
  return std::all_of(data_->begin(), data_->end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::equal(data_->begin(), data_->end(), other.data_->begin(), [](float a, float b) {
    return std::memcmp(&a, &b, sizeof(float)) == 0;
  });
}

const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.parameter = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (int in : inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size())) throw ContractError("tape: dangling input");
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

std::span<const float> Tape::Adjoint::grad(int id) const { return (*grads_)[id]; }

std::span<float> Tape::Adjoint::accum(int id) {
  auto& g = (*grads_)[id];
  if (g.empty()) g.assign(tape_->nodes_[id].value.size(), 0.0f);
  return g;
}

bool Tape::Adjoint::wants(int id) const { return tape_->nodes_[id].requires_grad; }

Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
  const Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
  }
  std::vector<std::vector<float>> grads(nodes_.size());
  Gradients out;
  if (!root.requires_grad) return out;
  grads[loss.id].assign(1, 1.0f);

  Adjoint adj;
  adj.tape_ = this;
  adj.grads_ = &grads;
  for (int id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || grads[id].empty()) continue;
    if (n.parameter) {
      out.emplace(id, Tensor(n.value.shape(), grads[id]));
      continue;
    }
    n.backward(adj, id);
    // Intermediate adjoints are no longer needed once propagated.
    std::vector<float>().swap(grads[id]);
  }
  // Reachable parameters with no path contribution still get a zero entry.
  for (int id = 0; id <= loss.id; ++id) {
    if (nodes_[id].parameter && !out.count(id)) {
      out.emplace(id, Tensor::zeros(nodes_[id].value.shape()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

// c[m x n] (+)= a[m x k] * b[k x n], accumulation order over k is ascending.
void gemm(int m, int k, int n, const float* a, const float* b, float* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> transpose(std::span<const float> x, int rows, int cols) {
  std::vector<float> t(x.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) t[static_cast<std::size_t>(c) * rows + r] = x[static_cast<std::size_t>(r) * cols + c];
  return t;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

float gelu_value(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  const float u = k * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_grad(float x) {
  constexpr float k = 0.7978845608028654f;
  const float u = k * (x + 0.044715f * x * x * x);
  const float t = std::tanh(u);
  const float du = k * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const int m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  gemm(m, k, n, av.data().data(), bv.data().data(), out.data(), false);
  const int ia = a.id, ib = b.id;
  return a.tape->record(Tensor({m, n}, std::move(out)), {ia, ib},
                        [ia, ib, m, k, n, tape = a.tape](Tape::Adjoint& adj, int self) {
                          auto g = adj.grad(self);
                          if (adj.wants(ia)) {
                            auto bt = transpose(tape->value(ib).data(), k, n);
                            gemm(m, n, k, g.data(), bt.data(), adj.accum(ia).data(), true);
                          }
                          if (adj.wants(ib)) {
                            auto at = transpose(tape->value(ia).data(), m, k);
                            gemm(k, m, n, at.data(), g.data(), adj.accum(ib).data(), true);
                          }
                        });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  const int m = av.shape()[0], k = av.shape()[1], n = bv.shape()[0];
  if (bv.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()) + "^T");
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  auto bt = transpose(bv.data(), n, k);
  gemm(m, k, n, av.data().data(), bt.data(), out.data(), false);
  const int ia = a.id, ib = b.id;
  return a.tape->record(Tensor({m, n}, std::move(out)), {ia, ib},
                        [ia, ib, m, k, n, tape = a.tape](Tape::Adjoint& adj, int self) {
                          auto g = adj.grad(self);
                          if (adj.wants(ia)) {
                            // dA = G * B, B is n x k
                            gemm(m, n, k, g.data(), tape->value(ib).data().data(), adj.accum(ia).data(), true);
                          }
                          if (adj.wants(ib)) {
                            // dB = G^T * A
                            auto gt = transpose(g, m, n);
                            gemm(n, m, k, gt.data(), tape->value(ia).data().data(), adj.accum(ib).data(), true);
                          }
                        });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(av, bv, "add");
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record(Tensor(av.shape(), std::move(out)), {ia, ib}, [ia, ib](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    for (int id : {ia, ib}) {
      if (!adj.wants(id)) continue;
      auto acc = adj.accum(id);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const int n = xv.cols();
  if (bv.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " does not match rows of " + shape_str(xv.shape()));
  }
  const int m = xv.rows();
  std::vector<float> out(xv.size());
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out[static_cast<std::size_t>(r) * n + c] = xv.at(r, c) + bv[c];
  const int ix = x.id, ib = bias.id;
  return x.tape->record(Tensor(xv.shape(), std::move(out)), {ix, ib}, [ix, ib, m, n](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    if (adj.wants(ix)) {
      auto acc = adj.accum(ix);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
    if (adj.wants(ib)) {
      auto acc = adj.accum(ib);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) acc[c] += g[static_cast<std::size_t>(r) * n + c];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(av, bv, "mul");
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record(Tensor(av.shape(), std::move(out)), {ia, ib},
                        [ia, ib, tape = a.tape](Tape::Adjoint& adj, int self) {
                          auto g = adj.grad(self);
                          const Tensor& av = tape->value(ia);
                          const Tensor& bv = tape->value(ib);
                          if (adj.wants(ia)) {
                            auto acc = adj.accum(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bv[i];
                          }
                          if (adj.wants(ib)) {
                            auto acc = adj.accum(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * av[i];
                          }
                        });
}

Var scale(Var x, float s) {
  const Tensor& xv = x.value();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  const int ix = x.id;
  return x.tape->record(Tensor(xv.shape(), std::move(out)), {ix}, [ix, s](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    auto acc = adj.accum(ix);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * s;
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (float v : xv.data()) s += v;
  const int ix = x.id;
  return x.tape->record(Tensor::scalar(static_cast<float>(s)), {ix}, [ix](Tape::Adjoint& adj, int self) {
    const float g = adj.grad(self)[0];
    auto acc = adj.accum(ix);
    for (float& v : acc) v += g;
  });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(xv[i]);
  const int ix = x.id;
  return x.tape->record(Tensor(xv.shape(), std::move(out)), {ix}, [ix, tape = x.tape](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    const Tensor& xv = tape->value(ix);
    auto acc = adj.accum(ix);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * gelu_grad(xv[i]);
  });
}

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  if (!(eps > 0.0f)) throw ContractError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const int n = xv.cols();
  const int m = xv.rows();
  if (gain.value().size() != static_cast<std::size_t>(n) || bias.value().size() != static_cast<std::size_t>(n)) {
    throw ShapeError("layer_norm: gain/bias width does not match " + shape_str(xv.shape()));
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  std::vector<float> out(xv.size());
  std::vector<float> xhat(xv.size());
  std::vector<float> inv_std(m);
  for (int r = 0; r < m; ++r) {
    const float* row = xv.data().data() + static_cast<std::size_t>(r) * n;
    float mean = 0.0f;
    for (int c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (int c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<float>(n);
    const float is = 1.0f / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int c = 0; c < n; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * n + c;
      xhat[i] = (row[c] - mean) * is;
      out[i] = xhat[i] * gv[c] + bv[c];
    }
  }
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(
      Tensor(xv.shape(), std::move(out)), {ix, ig, ib},
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std), tape = x.tape](Tape::Adjoint& adj,
                                                                                            int self) {
        auto g = adj.grad(self);
        const Tensor& gv = tape->value(ig);
        if (adj.wants(ig)) {
          auto acc = adj.accum(ig);
          for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) acc[c] += g[static_cast<std::size_t>(r) * n + c] * xhat[static_cast<std::size_t>(r) * n + c];
        }
        if (adj.wants(ib)) {
          auto acc = adj.accum(ib);
          for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) acc[c] += g[static_cast<std::size_t>(r) * n + c];
        }
        if (adj.wants(ix)) {
          auto acc = adj.accum(ix);
          for (int r = 0; r < m; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * n;
            float mean_d = 0.0f, mean_dx = 0.0f;
            for (int c = 0; c < n; ++c) {
              const float d = g[base + c] * gv[c];
              mean_d += d;
              mean_dx += d * xhat[base + c];
            }
            mean_d /= static_cast<float>(n);
            mean_dx /= static_cast<float>(n);
            for (int c = 0; c < n; ++c) {
              const float d = g[base + c] * gv[c];
              acc[base + c] += inv_std[r] * (d - mean_d - xhat[base + c] * mean_dx);
            }
          }
        }
      });
}

namespace {

// Softmax over the first visible[r] entries of each row; remaining entries 0.
Var masked_softmax(Var x, std::vector<int> visible) {
  const Tensor& xv = x.value();
  const int n = xv.cols();
  const int m = xv.rows();
  std::vector<float> out(xv.size(), 0.0f);
  for (int r = 0; r < m; ++r) {
    const float* row = xv.data().data() + static_cast<std::size_t>(r) * n;
    float* orow = out.data() + static_cast<std::size_t>(r) * n;
    const int vis = visible[r];
    if (vis <= 0) continue;
    float mx = row[0];
    for (int c = 1; c < vis; ++c) mx = std::max(mx, row[c]);
    float z = 0.0f;
    for (int c = 0; c < vis; ++c) {
      orow[c] = std::exp(row[c] - mx);
      z += orow[c];
    }
    for (int c = 0; c < vis; ++c) orow[c] /= z;
  }
  const int ix = x.id;
  return x.tape->record(Tensor(xv.shape(), std::move(out)), {ix},
                        [ix, m, n, visible = std::move(visible), tape = x.tape](Tape::Adjoint& adj, int self) {
                          auto g = adj.grad(self);
                          const Tensor& y = tape->value(self);
                          auto acc = adj.accum(ix);
                          for (int r = 0; r < m; ++r) {
                            const std::size_t base = static_cast<std::size_t>(r) * n;
                            float dot = 0.0f;
                            for (int c = 0; c < visible[r]; ++c) dot += g[base + c] * y[base + c];
                            for (int c = 0; c < visible[r]; ++c) acc[base + c] += y[base + c] * (g[base + c] - dot);
                          }
                        });
}

}  // namespace

Var softmax_rows(Var x) {
  return masked_softmax(x, std::vector<int>(x.value().rows(), x.value().cols()));
}

Var causal_softmax(Var scores, int prefix_len) {
  const int m = scores.value().rows();
  const int n = scores.value().cols();
  if (prefix_len < 0 || n != prefix_len + m) {
    throw ShapeError("causal_softmax: scores " + shape_str(scores.shape()) + " incompatible with prefix length " +
                     std::to_string(prefix_len));
  }
  std::vector<int> visible(m);
  for (int r = 0; r < m; ++r) visible[r] = prefix_len + r + 1;
  return masked_softmax(scores, std::move(visible));
}

ColumnSets tree_columns(std::span<const int> parents, int prefix_len) {
  const int m = static_cast<int>(parents.size());
  auto sets = std::make_shared<std::vector<std::vector<int>>>(m);
  for (int r = 0; r < m; ++r) {
    if (parents[r] >= r || parents[r] < -1) {
      throw ContractError("tree_columns: parent of row " + std::to_string(r) + " must precede it");
    }
    std::vector<int>& cols = (*sets)[r];
    if (parents[r] >= 0) {
      cols = (*sets)[parents[r]];
    } else {
      for (int c = 0; c < prefix_len; ++c) cols.push_back(c);
    }
    cols.push_back(prefix_len + r);
  }
  return sets;
}

Var tree_softmax(Var scores, const ColumnSets& visible) {
  const Tensor& xv = scores.value();
  require_matrix(xv, "tree_softmax");
  const int m = xv.rows(), n = xv.cols();
  if (!visible || static_cast<int>(visible->size()) != m) throw ShapeError("tree_softmax: one column set per row required");
  std::vector<float> out(xv.size(), 0.0f);
  for (int r = 0; r < m; ++r) {
    const std::vector<int>& cols = (*visible)[r];
    if (cols.empty()) continue;
    if (cols.back() >= n) throw ShapeError("tree_softmax: visible column outside " + shape_str(xv.shape()));
    const float* row = xv.data().data() + static_cast<std::size_t>(r) * n;
    float* orow = out.data() + static_cast<std::size_t>(r) * n;
    float mx = row[cols[0]];
    for (int c : cols) mx = std::max(mx, row[c]);
    float z = 0.0f;
    for (int c : cols) {
      orow[c] = std::exp(row[c] - mx);
      z += orow[c];
    }
    for (int c : cols) orow[c] /= z;
  }
  const int ix = scores.id;
  return scores.tape->record(Tensor(xv.shape(), std::move(out)), {ix},
                             [ix, m, n, visible, tape = scores.tape](Tape::Adjoint& adj, int self) {
                               auto g = adj.grad(self);
                               const Tensor& y = tape->value(self);
                               auto acc = adj.accum(ix);
                               for (int r = 0; r < m; ++r) {
                                 const std::size_t base = static_cast<std::size_t>(r) * n;
                                 float dot = 0.0f;
                                 for (int c : (*visible)[r]) dot += g[base + c] * y[base + c];
                                 for (int c : (*visible)[r]) acc[base + c] += y[base + c] * (g[base + c] - dot);
                               }
                             });
}

Var slice_cols(Var x, int begin, int count) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  const int m = xv.shape()[0], n = xv.shape()[1];
  if (begin < 0 || count < 0 || begin + count > n) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(xv.shape()));
  }
  std::vector<float> out(static_cast<std::size_t>(m) * count);
  for (int r = 0; r < m; ++r)
    std::copy_n(xv.data().data() + static_cast<std::size_t>(r) * n + begin, count,
                out.data() + static_cast<std::size_t>(r) * count);
  const int ix = x.id;
  return x.tape->record(Tensor({m, count}, std::move(out)), {ix}, [ix, m, n, begin, count](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    auto acc = adj.accum(ix);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < count; ++c) acc[static_cast<std::size_t>(r) * n + begin + c] += g[static_cast<std::size_t>(r) * count + c];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const int m = parts[0].value().rows();
  std::vector<int> widths;
  std::vector<int> ids;
  int n = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    ids.push_back(p.id);
    n += p.value().cols();
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  int off = 0;
  for (const Var& p : parts) {
    const int w = p.value().cols();
    for (int r = 0; r < m; ++r)
      std::copy_n(p.value().data().data() + static_cast<std::size_t>(r) * w, w,
                  out.data() + static_cast<std::size_t>(r) * n + off);
    off += w;
  }
  return parts[0].tape->record(Tensor({m, n}, std::move(out)), ids, [ids, widths, m, n](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int w = widths[k];
      if (adj.wants(ids[k])) {
        auto acc = adj.accum(ids[k]);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < w; ++c) acc[static_cast<std::size_t>(r) * w + c] += g[static_cast<std::size_t>(r) * n + off + c];
      }
      off += w;
    }
  });
}

Var concat_rows(Var top, Var bottom) {
  require_same_tape(top, bottom);
  const Tensor& tv = top.value();
  const Tensor& bv = bottom.value();
  require_matrix(tv, "concat_rows");
  require_matrix(bv, "concat_rows");
  if (tv.cols() != bv.cols()) {
    throw ShapeError("concat_rows: width mismatch " + shape_str(tv.shape()) + " vs " + shape_str(bv.shape()));
  }
  const int n = tv.cols();
  const int mt = tv.shape()[0], mb = bv.shape()[0];
  std::vector<float> out;
  out.reserve(tv.size() + bv.size());
  out.insert(out.end(), tv.data().begin(), tv.data().end());
  out.insert(out.end(), bv.data().begin(), bv.data().end());
  const int it = top.id, ib = bottom.id;
  const std::size_t split = tv.size();
  return top.tape->record(Tensor({mt + mb, n}, std::move(out)), {it, ib}, [it, ib, split](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    if (adj.wants(it)) {
      auto acc = adj.accum(it);
      for (std::size_t i = 0; i < split; ++i) acc[i] += g[i];
    }
    if (adj.wants(ib)) {
      auto acc = adj.accum(ib);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[split + i];
    }
  });
}

namespace {

Var gather_rows(Var x, std::span<const int> rows, const char* op) {
  const Tensor& xv = x.value();
  require_matrix(xv, op);
  const int m = xv.shape()[0], n = xv.shape()[1];
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<float> out(idx.size() * static_cast<std::size_t>(n));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= m) {
      throw IndexError(std::string(op) + ": row " + std::to_string(idx[r]) + " outside [0, " + std::to_string(m) + ")");
    }
    std::copy_n(xv.data().data() + static_cast<std::size_t>(idx[r]) * n, n, out.data() + r * n);
  }
  const int ix = x.id;
  const int count = static_cast<int>(idx.size());
  return x.tape->record(Tensor({count, n}, std::move(out)), {ix}, [ix, n, idx = std::move(idx)](Tape::Adjoint& adj, int self) {
    auto g = adj.grad(self);
    auto acc = adj.accum(ix);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < n; ++c) acc[static_cast<std::size_t>(idx[r]) * n + c] += g[r * n + c];
  });
}

}  // namespace

Var embedding(Var table, std::span<const int> ids) { return gather_rows(table, ids, "embedding"); }

Var select_rows(Var x, std::span<const int> rows) { return gather_rows(x, rows, "select_rows"); }

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const int> mask) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const int t_len = lv.shape()[0], vocab = lv.shape()[1];
  if (static_cast<int>(targets.size()) != t_len || static_cast<int>(mask.size()) != t_len) {
    throw ShapeError("cross_entropy: targets/mask length must equal " + std::to_string(t_len));
  }
  int count = 0;
  for (int t = 0; t < t_len; ++t) {
    if (mask[t] == 0) continue;
    if (targets[t] < 0 || targets[t] >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(targets[t]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    ++count;
  }
  std::vector<float> probs(lv.size(), 0.0f);
  double loss = 0.0;
  for (int t = 0; t < t_len; ++t) {
    if (mask[t] == 0) continue;
    const float* row = lv.data().data() + static_cast<std::size_t>(t) * vocab;
    float* prow = probs.data() + static_cast<std::size_t>(t) * vocab;
    float mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    float z = 0.0f;
    for (int v = 0; v < vocab; ++v) {
      prow[v] = std::exp(row[v] - mx);
      z += prow[v];
    }
    for (int v = 0; v < vocab; ++v) prow[v] /= z;
    loss += static_cast<double>(std::log(z) + mx - row[targets[t]]);
  }
  const float value = count > 0 ? static_cast<float>(loss / count) : 0.0f;
  const int il = logits.id;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<int> mk(mask.begin(), mask.end());
  return logits.tape->record(
      Tensor::scalar(value), {il},
      [il, vocab, count, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk)](Tape::Adjoint& adj, int self) {
        if (count == 0) return;
        const float g = adj.grad(self)[0] / static_cast<float>(count);
        auto acc = adj.accum(il);
        for (std::size_t t = 0; t < tg.size(); ++t) {
          if (mk[t] == 0) continue;
          const std::size_t base = t * vocab;
          for (int v = 0; v < vocab; ++v) acc[base + v] += g * probs[base + v];
          acc[base + tg[t]] -= g;
        }
      });
}

}  // namespace mope
