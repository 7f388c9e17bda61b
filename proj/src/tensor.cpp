#include "unetvl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace uvl {

namespace {

thread_local MemoryStats t_memory{};
thread_local std::uint64_t t_flops = 0;
thread_local bool t_grad_mode = true;
#ifdef NDEBUG
thread_local bool t_check_each_op = false;
#else
thread_local bool t_check_each_op = true;
#endif

void track_bytes(std::int64_t delta) {
  t_memory.live_bytes += delta;
  t_memory.peak_bytes = std::max(t_memory.peak_bytes, t_memory.live_bytes);
}

void round_to_f32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

namespace detail {

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  TensorImpl(Shape s, std::vector<double> v, DType dt)
      : shape(std::move(s)),
        dtype(dt),
        values(std::move(v)),
        ticket(static_cast<std::int64_t>(values.size() * dtype_size(dt))) {}

  Shape shape;
  DType dtype;
  std::vector<double> values;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> grad_fn;
  ScratchTicket ticket;
};

struct TensorAccess {
  static const std::shared_ptr<TensorImpl>& impl(const Tensor& t) { return t.impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
};

}  // namespace detail

using detail::Node;
using detail::TensorAccess;
using detail::TensorImpl;

std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

std::string_view dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

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

// ---------------------------------------------------------------------------
// accounting

MemoryStats memory_stats() { return t_memory; }

std::int64_t reset_peak_memory() {
  t_memory.peak_bytes = t_memory.live_bytes;
  return t_memory.live_bytes;
}

std::uint64_t flop_count() { return t_flops; }
void reset_flop_count() { t_flops = 0; }
void add_flops(std::uint64_t n) { t_flops += n; }

ScratchTicket::ScratchTicket(std::int64_t bytes) : bytes_(bytes) { track_bytes(bytes_); }

ScratchTicket::ScratchTicket(ScratchTicket&& other) noexcept : bytes_(std::exchange(other.bytes_, 0)) {}

ScratchTicket& ScratchTicket::operator=(ScratchTicket&& other) noexcept {
  if (this != &other) {
    track_bytes(-bytes_);
    bytes_ = std::exchange(other.bytes_, 0);
  }
  return *this;
}

ScratchTicket::~ScratchTicket() { track_bytes(-bytes_); }

NoGradGuard::NoGradGuard() : previous_(t_grad_mode) { t_grad_mode = false; }
NoGradGuard::~NoGradGuard() { t_grad_mode = previous_; }
bool grad_mode_enabled() { return t_grad_mode; }

void set_check_finite_each_op(bool enabled) { t_check_each_op = enabled; }
bool check_finite_each_op() { return t_check_each_op; }

void check_finite(const Tensor& t, std::string_view where) {
  const auto values = t.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at flat index " << i << " in " << where
         << " (shape " << shape_str(t.shape()) << ")";
      throw NumericError(os.str());
    }
  }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, DType dtype) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  if (dtype == DType::F32) round_to_f32(values);
  impl_ = std::make_shared<TensorImpl>(std::move(shape), std::move(values), dtype);
}

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return full(shape, 0.0, dtype); }
Tensor Tensor::ones(const Shape& shape, DType dtype) { return full(shape, 1.0, dtype); }
Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value), dtype);
}
Tensor Tensor::scalar(double value, DType dtype) { return Tensor({}, {value}, dtype); }

namespace {
const TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) throw GraphError("use of an undefined tensor");
  return *impl;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).values.size(); }
DType Tensor::dtype() const { return checked(impl_).dtype; }
std::span<const double> Tensor::data() const { return checked(impl_).values; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

std::span<double> Tensor::mutable_data() {
  checked(impl_);
  if (impl_->grad_fn) throw GraphError("mutable_data() on a non-leaf tensor");
  return impl_->values;
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked(impl_);
  if (impl_->grad_fn) throw GraphError("set_requires_grad() on a non-leaf tensor");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).grad_fn == nullptr; }
bool Tensor::has_grad() const { return checked(impl_).has_grad; }

Tensor Tensor::grad() const {
  if (!has_grad()) return Tensor();
  return Tensor(impl_->shape, impl_->grad, impl_->dtype);
}

void Tensor::zero_grad() {
  checked(impl_);
  impl_->has_grad = false;
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

void Tensor::backward() const { uvl::backward(*this); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->values, impl_->dtype); }

Tensor Tensor::to(DType dtype) const { return Tensor(shape(), impl_->values, dtype); }

// ---------------------------------------------------------------------------
// graph recording

DType common_dtype(std::string_view op, std::initializer_list<Tensor> inputs) {
  std::optional<DType> dt;
  for (const Tensor& t : inputs) {
    if (!t.defined()) continue;
    if (dt && *dt != t.dtype()) {
      throw DimensionError(std::string(op) + ": dtype mismatch (" + std::string(dtype_name(*dt)) +
                           " vs " + std::string(dtype_name(t.dtype())) + ")");
    }
    dt = t.dtype();
  }
  return dt.value_or(DType::F64);
}

namespace {

Tensor make_result_impl(std::string_view op, Shape shape, std::vector<double> values, DType dtype,
                        std::span<const Tensor> inputs, BackwardFn backward) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError(std::string(op) + ": result shape " + shape_str(shape) +
                         " does not match " + std::to_string(values.size()) + " values");
  }
  if (dtype == DType::F32) round_to_f32(values);
  auto impl = std::make_shared<TensorImpl>(std::move(shape), std::move(values), dtype);
  Tensor out = TensorAccess::wrap(impl);
  if (t_check_each_op) check_finite(out, op);

  bool record = false;
  if (t_grad_mode && backward) {
    for (const Tensor& t : inputs) {
      if (t.defined() && t.requires_grad()) record = true;
    }
  }
  if (record) {
    auto node = std::make_shared<Node>();
    node->op = std::string(op);
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(TensorAccess::impl(t));
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
    impl->requires_grad = true;
  }
  return out;
}

}  // namespace

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, DType dtype,
                   std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return make_result_impl(op, std::move(shape), std::move(values), dtype,
                          std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, DType dtype,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  return make_result_impl(op, std::move(shape), std::move(values), dtype, inputs, std::move(backward));
}

// ---------------------------------------------------------------------------
// backward

namespace {

// Post-order DFS: every impl appears after all impls it depends on. Holding
// owning pointers keeps intermediates alive while their producers are
// released during backward.
std::vector<std::shared_ptr<TensorImpl>> topo_order(const std::shared_ptr<TensorImpl>& root) {
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    const Node* node = stack.back().first->grad_fn.get();
    std::size_t& next = stack.back().second;
    if (node && next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (child && child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(std::move(stack.back().first));
    stack.pop_back();
  }
  return order;
}

class MapSink final : public GradSink {
 public:
  MapSink(const Node& node, std::unordered_map<TensorImpl*, std::vector<double>>& grads)
      : node_(node), grads_(grads) {}

  bool wants(std::size_t i) const override {
    return i < node_.inputs.size() && node_.inputs[i] && node_.inputs[i]->requires_grad;
  }

  std::span<double> at(std::size_t i) override {
    if (!wants(i)) throw GraphError(node_.op + ": gradient requested for input that does not need it");
    TensorImpl* in = node_.inputs[i].get();
    auto& buf = grads_[in];
    if (buf.size() != in->values.size()) buf.assign(in->values.size(), 0.0);
    return buf;
  }

 private:
  const Node& node_;
  std::unordered_map<TensorImpl*, std::vector<double>>& grads_;
};

}  // namespace

Graph Graph::from(const Tensor& root) {
  Graph g;
  if (!root.defined()) return g;
  for (const auto& impl : topo_order(TensorAccess::impl(root))) {
    if (impl->grad_fn) g.entries_.push_back({impl->grad_fn->op, impl->grad_fn->inputs.size()});
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw GraphError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  TensorImpl* root = TensorAccess::impl(loss).get();
  if (!root->requires_grad) throw GraphError("backward: loss is not connected to any recorded graph");
  if (root->grad_fn && root->grad_fn->consumed) throw GraphError("backward: graph already consumed");

  std::unordered_map<TensorImpl*, std::vector<double>> grads;
  grads[root] = {1.0};
  const auto order = topo_order(TensorAccess::impl(loss));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = it->get();
    auto found = grads.find(impl);
    if (!impl->grad_fn) {
      if (!impl->requires_grad) continue;
      if (!impl->has_grad) {
        impl->grad.assign(impl->values.size(), 0.0);
        impl->has_grad = true;
      }
      if (found != grads.end()) {
        for (std::size_t i = 0; i < impl->grad.size(); ++i) impl->grad[i] += found->second[i];
        if (impl->dtype == DType::F32) round_to_f32(impl->grad);
        grads.erase(found);
      }
      continue;
    }
    Node& node = *impl->grad_fn;
    if (node.consumed) throw GraphError("backward: graph already consumed at op " + node.op);
    if (found != grads.end()) {
      MapSink sink(node, grads);
      node.backward(found->second, impl->values, sink);
      grads.erase(impl);
    }
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
  }
}

}  // namespace uvl
