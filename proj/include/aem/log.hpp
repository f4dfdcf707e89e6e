#pragma once

// Minimal stderr logger. Verbosity is controlled by the AEM_LOG_LEVEL
// environment variable (debug | info | warn | error), defaulting to info.

#include <cstdio>
#include <cstdlib>
#include <string>

namespace aem {

enum class LogLevel : int { debug = 0, info = 1, warn = 2, error = 3 };

inline LogLevel log_level_from_env() {
  const char* raw = std::getenv("AEM_LOG_LEVEL");
  if (raw == nullptr) return LogLevel::info;
  const std::string v(raw);
  if (v == "debug") return LogLevel::debug;
  if (v == "info") return LogLevel::info;
  if (v == "warn") return LogLevel::warn;
  if (v == "error") return LogLevel::error;
  return LogLevel::info;
}

inline LogLevel& log_level() {
  static LogLevel level = log_level_from_env();
  return level;
}

inline void log_at(LogLevel at, const char* tag, const std::string& msg) {
  if (static_cast<int>(at) < static_cast<int>(log_level())) return;
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_debug(const std::string& msg) { log_at(LogLevel::debug, "debug", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::info, "info", msg); }
inline void log_warn(const std::string& msg) { log_at(LogLevel::warn, "warn", msg); }
inline void log_error(const std::string& msg) { log_at(LogLevel::error, "error", msg); }

}  // namespace aem
