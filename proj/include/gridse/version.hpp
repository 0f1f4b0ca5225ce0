#pragma once

namespace gridse {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace gridse
