#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace sparc::log {

enum class Level { debug = 0, info = 1, warn = 2 };

// SPARC_LOG=debug|info selects the threshold; default is info.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("SPARC_LOG");
    if (env != nullptr && std::strcmp(env, "debug") == 0) return Level::debug;
    return Level::info;
  }();
  return level;
}

inline void emit(Level level, const char* tag, const std::string& msg) {
  if (level < threshold()) return;
  std::fprintf(stderr, "[sparc][%s] %s\n", tag, msg.c_str());
}

inline void debug(const std::string& msg) { emit(Level::debug, "debug", msg); }
inline void info(const std::string& msg) { emit(Level::info, "info", msg); }
inline void warn(const std::string& msg) { emit(Level::warn, "warn", msg); }

}  // namespace sparc::log
