#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mope {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Immutable dense float32 tensor, row-major. Copies share storage.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, float value);
  static Tensor scalar(float value);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_->size(); }
  std::span<const float> data() const { return *data_; }
  float operator[](std::size_t i) const { return (*data_)[i]; }

  int rank() const { return static_cast<int>(shape_.size()); }
  // Leading dims flattened; valid for any rank >= 1.
  int rows() const;
  int cols() const { return shape_.back(); }
  float at(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * cols() + c]; }

  std::vector<float> to_vector() const { return *data_; }
  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using Gradients = std::map<int, Tensor>;

// Records primitive operations in creation order; nodes only reference
// earlier nodes, so reverse creation order is a valid topological order.
class Tape {
 public:
  Var constant(Tensor value);
  Var parameter(Tensor value);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool is_parameter(int id) const { return nodes_[id].parameter; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of a scalar loss w.r.t. every parameter node reachable from it.
  // Accumulators start at zero on every call.
  Gradients backward(Var loss) const;

  // Adjoint context handed to per-op backward closures.
  class Adjoint {
   public:
    std::span<const float> grad(int id) const;
    std::span<float> accum(int id);
    bool wants(int id) const;

   private:
    friend class Tape;
    const Tape* tape_ = nullptr;
    std::vector<std::vector<float>>* grads_ = nullptr;
  };
  using BackwardFn = std::function<void(Adjoint&, int self)>;

  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward);

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool parameter = false;
  };
  std::deque<Node> nodes_;  // stable references across record()
};

// Primitives. Each materializes its output and registers its adjoint.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var add_bias(Var x, Var bias);
Var mul(Var a, Var b);
Var scale(Var x, float s);
Var sum(Var x);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, float eps);
Var softmax_rows(Var x);
// Row i may see columns [0, prefix_len + i]; the rest get weight exactly 0.
Var causal_softmax(Var scores, int prefix_len);
// Sorted visible columns per row, shared between the heads of one forward pass.
using ColumnSets = std::shared_ptr<const std::vector<std::vector<int>>>;
// Token tree attention: row i sees the prefix columns plus itself and its
// ancestors (parents[i] < i, -1 for a root), each offset by prefix_len.
ColumnSets tree_columns(std::span<const int> parents, int prefix_len);
Var tree_softmax(Var scores, const ColumnSets& visible);
Var slice_cols(Var x, int begin, int count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(Var top, Var bottom);
Var embedding(Var table, std::span<const int> ids);
Var select_rows(Var x, std::span<const int> rows);
// Mean over mask==1 positions of -log softmax(logits)[t, target_t].
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const int> mask);

}  // namespace mope
