#pragma once

namespace coseg {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kVersionString = "coseg 0.1.0";

}  // namespace coseg
