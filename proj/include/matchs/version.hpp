#pragma once

namespace matchs {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace matchs
