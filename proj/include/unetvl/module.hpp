#pragma once

#include <string>

#include "unetvl/serialize.hpp"
#include "unetvl/tensor.hpp"

namespace uvl {

/// Anything that owns learnable leaves. Returned tensors share storage with
/// the module, so optimizers update the module through them.
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(const std::string& prefix, NamedTensors& out) const = 0;

  NamedTensors parameters(const std::string& prefix = "") const {
    NamedTensors out;
    collect_parameters(prefix, out);
    return out;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }
};

/// Marks a freshly initialized leaf as learnable.
inline Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace uvl
