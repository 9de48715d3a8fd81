#pragma once

namespace vilds {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace vilds
