#pragma once

namespace aem {

inline constexpr int kVersionMajor = 1;
inline constexpr int kVersionMinor = 0;
inline constexpr int kVersionPatch = 0;
inline constexpr const char* kVersionString = "1.0.0";

// Bumped whenever a file format written by the tools changes incompatibly.
inline constexpr int kArtifactFormatVersion = 1;

}  // namespace aem
