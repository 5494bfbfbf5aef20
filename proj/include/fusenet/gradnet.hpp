#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet::gradnet {

// Dense 5-D shape (batch, channels, depth, height, width). Spatial axes map
// onto volgrid's z/y/x in that order.
struct Shape {
  int n = 1, c = 1, d = 1, h = 1, w = 1;

  bool operator==(const Shape&) const = default;
  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(d) * h * static_cast<std::size_t>(w);
  }
  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * static_cast<std::size_t>(w); }
  std::string str() const;
};

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;   // kept only when a backprop closure exists
  std::function<void(TensorNode&)> backprop;          // accumulates into parents' grads

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

// Shared-ownership handle over a graph node. Values are the forward payload;
// grad appears on grad-requiring nodes after backward().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, T value, bool requires_grad = false);
  static Tensor from_values(Shape s, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode sweep from a scalar node: seeds d(this)/d(this)=1 and walks
  // the tape in reverse topological order.
  void backward() const;

  std::shared_ptr<detail::TensorNode<T>> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool frozen = false;
};

// Frozen parameters take no part in autodiff: no grad allocation, no updates.
template <typename T>
void set_frozen(Parameter<T>& p, bool frozen) {
  p.frozen = frozen;
  p.tensor.set_requires_grad(!frozen);
}

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;  // one entry per channel
  std::vector<T> running_var;

  static BatchNormState init(int channels) {
    return BatchNormState{std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))};
  }
};

// ---- Differentiable ops -------------------------------------------------
// All forward passes use a fixed summation order per output element, so
// results are bit-identical across runs and thread counts.

// Cross-correlation. weight (Cout,Cin,k,k,k), bias (Cout,1,1,1,1),
// stride in {1,2}; output spatial = floor((S + 2*pad - k)/stride) + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding);

// Per-voxel channel mixing; the aggregation path depends on it directly.
template <typename T>
Tensor<T> conv1x1x1(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// scale/shift shaped (1,C,1,1,1). Train mode normalizes with batch statistics
// (biased variance) and folds them into the running stats with retention
// `momentum`; eval mode uses the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, BatchNormState<T>& stats,
                     bool training, T eps = T(1e-5), T momentum = T(0.9));

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// weight (out,in,1,1,1) acting on the flattened C*D*H*W axis; bias (out,1,1,1,1).
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Trilinear resize with the align-corners-false convention; factor in {2,4,8}.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, int factor);

// General form used where target dims are not an integer multiple (spatial
// prior grids, odd-sized logits).
template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, std::array<int, 3> out_dhw);

// Mean over all (n,d,h,w) positions of -log softmax(logits)[label]; labels
// run over positions in n-major, then d,h,w order. Stabilized by max
// subtraction.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat_c(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> stack_n(const std::vector<Tensor<T>>& parts);

// Axis-aligned window copy; start may reach outside the input, those
// positions read (and backprop) as zero.
template <typename T>
Tensor<T> slice_dhw(const Tensor<T>& x, std::array<int, 3> start_dhw, std::array<int, 3> out_dhw);

// Dot product with a fixed projection; scalar output. Test harness uses this
// to reduce op outputs for gradient checks.
template <typename T>
Tensor<T> inner_with(const Tensor<T>& x, const std::vector<T>& weights);

// ---- Optimization -------------------------------------------------------

template <typename T>
struct AdamState {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  long long step = 0;
  std::vector<std::vector<T>> m;  // parallel to the parameter list
  std::vector<std::vector<T>> v;

  static AdamState init(const std::vector<Parameter<T>*>& params);
};

// Standard bias-corrected Adam. Frozen parameters are skipped entirely, and
// parameters without an accumulated gradient are left untouched.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, T lr);

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params);

struct CyclicLrSchedule {
  double lr_max = 1e-3;
  double lr_min = 1e-7;
  long long cycle_len_steps = 100;
  double decay_per_cycle = 1e-4;  // 0.01% shaved off the ceiling each cycle
};

// Triangular wave starting at the cycle ceiling, touching lr_min mid-cycle;
// ceiling of cycle c is lr_max * (1 - decay)^c.
double lr_at(const CyclicLrSchedule& schedule, long long step);

// ---- Initialization -----------------------------------------------------

// He-normal fill (std = sqrt(2 / fan_in)) from a caller-owned RNG stream.
template <typename T>
void he_normal_fill(std::vector<T>& values, std::size_t fan_in, std::uint64_t seed);

}  // namespace fusenet::gradnet
