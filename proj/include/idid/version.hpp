#pragma once

namespace idid {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kSchema = "idid-smm/1";

}  // namespace idid
