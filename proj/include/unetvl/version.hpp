#pragma once

namespace uvl {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace uvl
