#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unetvl/errors.hpp"

namespace uvl {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

std::size_t dtype_size(DType dt);
std::string_view dtype_name(DType dt);
std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
struct TensorAccess;
}  // namespace detail

/// Dense row-major array with optional gradient tracking.
///
/// A Tensor is a cheap handle; copies share the same underlying value.
/// Values are immutable once produced by an op. Only leaf tensors (no
/// recorded producer) expose mutable storage, which is what optimizers and
/// initializers write through.
///
/// Values are always held in double precision. An F32 tensor holds values
/// that are exactly representable as IEEE binary32: every op producing an
/// F32 result rounds its output, so F32 arithmetic is binary64 compute with
/// binary32 storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, DType dtype = DType::F64);

  static Tensor zeros(const Shape& shape, DType dtype = DType::F64);
  static Tensor ones(const Shape& shape, DType dtype = DType::F64);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::F64);
  static Tensor scalar(double value, DType dtype = DType::F64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  std::span<const double> data() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  /// Value of a one-element tensor.
  double item() const;

  /// Writable storage; only valid on leaves.
  std::span<double> mutable_data();

  bool requires_grad() const;
  /// Marks a leaf as a gradient sink. Throws GraphError on non-leaves.
  Tensor& set_requires_grad(bool flag = true);
  bool is_leaf() const;

  bool has_grad() const;
  /// Accumulated gradient as a fresh tensor (undefined if none).
  Tensor grad() const;
  void zero_grad();

  /// Runs reverse-mode accumulation from this scalar.
  void backward() const;

  /// Same values, no history, no grad requirement.
  Tensor detach() const;
  /// Converts dtype (rounding when narrowing); returns a detached copy.
  Tensor to(DType dtype) const;

  /// Identity of the underlying value (for graph bookkeeping).
  const detail::TensorImpl* id() const { return impl_.get(); }

 private:
  friend struct detail::TensorAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Live-tensor byte accounting for the current thread. Bytes are counted at
/// the logical dtype width (4 for F32, 8 for F64).
struct MemoryStats {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
};
MemoryStats memory_stats();
/// Sets peak := live, returning the live byte count.
std::int64_t reset_peak_memory();

/// Floating-point operation counter for the current thread.
std::uint64_t flop_count();
void reset_flop_count();
void add_flops(std::uint64_t n);

/// RAII accounting for op-internal scratch buffers that are not Tensors.
class ScratchTicket {
 public:
  ScratchTicket() = default;
  explicit ScratchTicket(std::int64_t bytes);
  ScratchTicket(ScratchTicket&& other) noexcept;
  ScratchTicket& operator=(ScratchTicket&& other) noexcept;
  ScratchTicket(const ScratchTicket&) = delete;
  ScratchTicket& operator=(const ScratchTicket&) = delete;
  ~ScratchTicket();

 private:
  std::int64_t bytes_ = 0;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_mode_enabled();

/// When enabled, every op checks its output for NaN/Inf and throws
/// NumericError. Defaults to on in debug builds, off in release builds.
void set_check_finite_each_op(bool enabled);
bool check_finite_each_op();

/// Throws NumericError naming `where` if any value is NaN/Inf.
void check_finite(const Tensor& t, std::string_view where);

// ---------------------------------------------------------------------------
// Extension interface used by every differentiable op.

/// Gradient destinations for the inputs of one node during backward.
class GradSink {
 public:
  virtual ~GradSink() = default;
  /// Whether input `i` needs a gradient at all.
  virtual bool wants(std::size_t i) const = 0;
  /// Accumulator for input `i` (zero-initialized on first use). Ops add
  /// their contribution into it.
  virtual std::span<double> at(std::size_t i) = 0;
};

/// Backward rule of one op: receives d(loss)/d(output), the output values,
/// and the sink for input gradients.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const double> out, GradSink& sink)>;

/// Wraps freshly computed values as an op result. Records a graph node with
/// `backward` when grad mode is on and any input requires grad. F32 results
/// are rounded here.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, DType dtype,
                   std::initializer_list<Tensor> inputs, BackwardFn backward);
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, DType dtype,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

/// Common dtype of `inputs`; throws DimensionError naming `op` on mismatch.
DType common_dtype(std::string_view op, std::initializer_list<Tensor> inputs);

/// Topologically ordered record of the operations reachable from a root.
class Graph {
 public:
  struct Entry {
    std::string op;
    std::size_t num_inputs;
  };
  static Graph from(const Tensor& root);
  /// Producers in topological order (inputs before consumers).
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

/// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf and
/// consumes the graph. Throws GraphError for non-scalar losses and for
/// graphs that were already consumed.
void backward(const Tensor& loss);

}  // namespace uvl
