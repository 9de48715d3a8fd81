#pragma once

namespace vilds::detail {

inline constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace vilds::detail
