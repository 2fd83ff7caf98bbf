#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dtsst {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// Dense row-major float64 array. Copies are shallow handles onto the same
// storage; use clone() for a deep copy. Tensors produced by recorded ops are
// treated as immutable; only leaves (parameters, inputs) should be written
// through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data() const;
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<double> mutable_grad() const;
  void zero_grad() const;

  // New leaf sharing no storage and no tape history.
  Tensor clone() const;
  // Leaf view of the same values without gradient tracking.
  Tensor detach() const;

  // True when this tensor was produced by an op recorded on the tape.
  bool is_recorded() const;

  const detail::TensorImpl* impl() const { return impl_.get(); }
  detail::TensorImpl* impl() { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Graph;
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(std::span<const double>)>);
};

// Ordered record of differentiable ops executed on this thread. Backward
// replays the record in exact reverse and then frees it.
class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  static Graph& current();

  // Number of ops currently recorded.
  std::size_t size() const { return entries_.size(); }
  std::uint64_t generation() const { return generation_; }

  // Drops all recorded ops without running them.
  void clear();

  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn fn;
  };

  void record(const std::shared_ptr<detail::TensorImpl>& output, BackwardFn fn);

  std::vector<Entry> entries_;
  std::uint64_t generation_ = 1;

  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(std::span<const double>)>);
};

// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
// `loss` on the current tape. `loss` must hold exactly one element.
void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Building block for ops: wraps `values` as a tensor and, when grad mode is on
// and any input requires grad, records `backward_fn` on the tape. The callback
// receives the output gradient and must accumulate into the inputs it captured
// (via mutable_grad()) for those that require grad.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(std::span<const double>)> backward_fn);

// Throws NumericalError naming `where` if any element is NaN or infinite.
void check_finite(const Tensor& t, const std::string& where);

}  // namespace dtsst
