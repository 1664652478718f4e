#pragma once

#include <cstdio>
#include <string>

#include "cdfsod/rng.hpp"

namespace cdfsod {

inline constexpr const char* kVersionString = "cdfsod 0.1.0";

// Content hash of the version string, recorded in run manifests.
inline std::string version_hash() {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                (unsigned long long)Rng::fnv1a(kVersionString));
  return buf;
}

}  // namespace cdfsod
