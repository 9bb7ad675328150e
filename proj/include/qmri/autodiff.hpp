#pragma once

// Small reverse-mode differentiation engine over channel-first [C,H,W]
// tensors. Graphs record ops in creation order, which is also a valid
// topological order, so backward is a single reverse sweep.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "qmri/error.hpp"

namespace qmri::ad {

using Shape = std::vector<std::size_t>;

// Eigen's vectorized kernels peel leading elements by runtime address, which
// changes float rounding. Fixed 64-byte alignment keeps results independent
// of where the allocator puts a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // same length as data once a backward pass has touched it
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, Buffer<T> values, bool needs_grad = false);
  template <typename A>
    requires(!std::is_same_v<A, AlignedAllocator<T>>)
  Tensor(Shape s, const std::vector<T, A>& values, bool needs_grad = false)
      : Tensor(std::move(s), Buffer<T>(values.begin(), values.end()), needs_grad) {}
  static Tensor zeros(Shape s, bool needs_grad = false);

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape s, const std::vector<T>& values, bool needs_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(s), values, needs_grad);
}

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  /// Registers externally owned storage. Gradients accumulate into t->grad
  /// when t->requires_grad is set.
  Var<T> leaf(TensorPtr<T> t);
  /// Owned, never differentiated.
  Var<T> constant(Tensor<T> t);
  /// Appends an op result. `fn` receives the graph and the node id and must
  /// push the node's gradient into its inputs.
  Var<T> record(Tensor<T> value, std::vector<int> inputs, BackwardFn fn);

  /// Populates gradients of every node reachable from `loss`. All gradient
  /// buffers are reset first, so parameters the loss ignores end at zero.
  void backward(Var<T> loss);

  Tensor<T>& tensor(int id) { return *nodes_.at(static_cast<std::size_t>(id)).value; }
  const Tensor<T>& tensor(int id) const { return *nodes_.at(static_cast<std::size_t>(id)).value; }
  Buffer<T>& grad(int id) { return tensor(id).grad; }
  bool needs_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).needs_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorPtr<T> value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->tensor(id);
}

// ---------------------------------------------------------------------------
// Operators. Spatial tensors are [C,H,W]; vectors are [n]; scalars are [1].

/// Cross-correlation with kernel k in {1,3}. x:[Cin,H,W] w:[Cout,Cin,k,k] b:[Cout].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = 0);

template <typename T>
Var<T> relu(Var<T> x);

/// 2x2 non-overlapping max. Ties send the gradient to the first index in
/// row-major order.
template <typename T>
Var<T> maxpool2(Var<T> x);

template <typename T>
Var<T> upsample_nearest2(Var<T> x);

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs);

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t count);

/// W v + b with v:[n], W:[m,n], b:[m].
template <typename T>
Var<T> linear(Var<T> v, Var<T> w, Var<T> b);

/// [n] -> [n,H,W], each plane constant.
template <typename T>
Var<T> broadcast_spatial(Var<T> v, std::size_t height, std::size_t width);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> x, T factor);

template <typename T>
Var<T> sum(Var<T> x);

/// sum(x^2) / N
template <typename T>
Var<T> mean_square(Var<T> x);

/// sum(x * r) for a fixed tensor r of identical shape.
template <typename T>
Var<T> dot_const(Var<T> x, const Tensor<T>& r);

/// pred, target:[C,H,W]; mask:[H,W] (nonzero = inside). Returns [C] holding
/// the mean squared error of each channel over the masked voxels.
template <typename T>
Var<T> masked_mse_per_channel(Var<T> pred, Var<T> target, Var<T> mask);

/// sum_i weights[i] * v[i], v:[n].
template <typename T>
Var<T> weighted_sum(Var<T> v, std::vector<T> weights);

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update driven by params[i]->grad. Throws
/// NumericError before touching anything when a gradient is not finite.
template <typename T>
void adam_step(std::span<const TensorPtr<T>> params, AdamState<T>& state, double lr);

// ---------------------------------------------------------------------------
// Finite-difference verification (64-bit only).

using GradClosure = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

/// Compares analytic gradients of `op` with central differences for every
/// element of every input. Non-scalar outputs are reduced with a fixed
/// random projection. Returns max |a-f| / max(|a|, |f|, 1e-8).
double grad_check(const GradClosure& op, const std::vector<TensorPtr<double>>& inputs, double eps,
                  std::uint64_t projection_seed = 12345);

}  // namespace qmri::ad
