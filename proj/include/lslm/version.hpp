#pragma once

namespace lslm {

inline constexpr const char* kVersionString = "0.1.0";

}  // namespace lslm
