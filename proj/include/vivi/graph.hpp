#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vivi/common.hpp"

// Reverse-mode differentiation tape over dense row-major arrays.
// A Graph owns the nodes of one forward computation; backward() walks the
// tape once and is then consumed until a new forward is built. Templated on
// the scalar type: float for training, double for finite-difference checks.

namespace vivi::ad {

template <typename T>
struct Array {
  Shape shape;
  std::vector<T> data;

  Array() = default;
  Array(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}
  explicit Array(Shape s) : shape(std::move(s)), data(static_cast<size_t>(vivi::numel(shape))) {}

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  static Array zeros(Shape s) { return Array(std::move(s)); }
  static Array scalar(T v) { return Array({1}, {v}); }
};

template <typename T>
struct Parameter {
  std::string name;
  Array<T> value;
  std::vector<T> grad;  // sized like value, zeroed between optimizer steps
  bool weight_decay_eligible = true;

  Parameter() = default;
  Parameter(std::string n, Array<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(v.data.size(), T(0)),
        weight_decay_eligible(wd) {
    grad.resize(value.data.size(), T(0));
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Running statistics for batch normalization (not differentiated through).
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  explicit BatchNormState(int64_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

enum class Padding { same, valid };

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

template <typename T>
class Graph {
 public:
  explicit Graph(bool nan_checks = true) : nan_checks_(nan_checks) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  Var<T> input(Array<T> value);              // not differentiated
  Var<T> variable(Array<T> value);           // differentiated; grad kept on the node
  Var<T> param(Parameter<T>& p);             // differentiated; grad accumulates into p.grad

  Array<T> value(Var<T> v) const;             // copy of shape + data
  const std::vector<T>& data(Var<T> v) const; // borrow of the raw values
  const Shape& shape(Var<T> v) const;
  // Gradient of the last backward() wrt this node (must be grad-tracked).
  const std::vector<T>& grad(Var<T> v) const;

  // Reverse pass from a scalar output. Populates grads of every reachable
  // grad-tracked node and accumulates into bound Parameters; parameters
  // registered on this graph but unreachable keep their (zero) grads.
  void backward(Var<T> output);

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

  // --- internals used by the op builders ---
  struct Node {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;
    bool needs_grad = false;
    const char* op = "leaf";
    Parameter<T>* bound = nullptr;
    std::function<void(Graph&, Node&)> back;  // empty for leaves
  };

  int add_node(Shape shape, std::vector<T> val, bool needs_grad, const char* op,
               std::vector<int> parents, std::function<void(Graph&, Node&)> back);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  // Gradient buffer of a node, allocated on demand during backward.
  std::vector<T>& grad_buf(int id);
  bool nan_checks() const { return nan_checks_; }
  void set_nan_checks(bool on) { nan_checks_ = on; }

 private:
  std::vector<Node> nodes_;
  std::vector<Parameter<T>*> bound_params_;
  bool consumed_ = false;
  bool nan_checks_ = true;
};

// ---------------------------------------------------------------------------
// Primitives. All validate shapes and throw ShapeError naming the primitive.
// ---------------------------------------------------------------------------

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T c);
template <typename T> Var<T> add_scalar(Var<T> a, T c);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh_act(Var<T> a);

template <typename T> Var<T> reshape(Var<T> a, Shape s);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& xs);
template <typename T> Var<T> slice_cols(Var<T> a, int64_t lo, int64_t hi);
template <typename T> Var<T> take_rows(Var<T> a, int64_t lo, int64_t hi);
template <typename T> Var<T> gather(Var<T> a, std::vector<int64_t> flat_idx);

// y = x W (+ b); x is (B,D), W is (D,N), b is (N).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b = std::nullopt);
// C = A B^T; A is (M,K), B is (N,K).
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);

// x is (B,H,W,C) NHWC; kernel is (Cout,KH,KW,Cin); output (B,OH,OW,Cout).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::optional<Var<T>> bias, int stride,
              Padding pad);
template <typename T> Var<T> global_avg_pool(Var<T> x);        // (B,H,W,C) -> (B,C)
template <typename T> Var<T> pool_rows(Var<T> x, int64_t group);  // mean of row groups

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state,
                  bool training, T momentum, T eps);
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps);
// Per-row mean 0 / variance 1 (biased variance, eps-regularized).
template <typename T> Var<T> standardize_rows(Var<T> x, T eps);
// Kernel (Cout,...) standardized per output channel.
template <typename T> Var<T> weight_standardize(Var<T> kernel, T eps);
template <typename T> Var<T> l2_normalize_rows(Var<T> x, T eps = T(1e-12));

template <typename T> Var<T> sum_all(Var<T> a);
template <typename T> Var<T> mean_all(Var<T> a);
template <typename T> Var<T> logsumexp_rows(Var<T> a);
// Entries with mask==0 are treated as absent (-inf). mask is row-major (R,C).
template <typename T>
Var<T> masked_logsumexp_rows(Var<T> a, std::vector<uint8_t> mask);
// Mean cross-entropy of row-wise softmax against integer labels.
template <typename T> Var<T> softmax_xent(Var<T> logits, std::vector<int> labels);
// Mean sigmoid binary cross-entropy against targets in [0,1].
template <typename T> Var<T> sigmoid_bce(Var<T> logits, std::vector<T> targets);
// D[i][j] = squared euclidean distance of rows i and j of x (B,E).
// Accumulation order is fixed (scalar, sequential) for exact parity with
// mining code that consumes the values.
template <typename T> Var<T> pairwise_sqdist(Var<T> x);

}  // namespace vivi::ad
