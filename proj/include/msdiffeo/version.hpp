#pragma once

namespace msdiffeo {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace msdiffeo
