#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace saor {

/// Raised when tensor shapes are incompatible for an operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed meshes (non-manifold edges, unmatched mirror vertices).
struct MeshError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised for unreadable or inconsistent input files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a numerical stage produces non-finite values. `stage` names it.
struct NumericError : std::runtime_error {
  NumericError(std::string stage_name, const std::string& what)
      : std::runtime_error(what), stage(std::move(stage_name)) {}
  std::string stage;
};

namespace log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

inline Level& threshold() {
  static Level level = Level::Info;
  return level;
}

template <typename... Args>
void write(Level level, const char* fmt, Args... args) {
  if (level < threshold()) return;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::fprintf(stderr, "[saor:%s] ", names[static_cast<int>(level)]);
  if constexpr (sizeof...(Args) == 0) {
    std::fputs(fmt, stderr);
  } else {
    std::fprintf(stderr, fmt, args...);
  }
  std::fputc('\n', stderr);
}

template <typename... Args>
void info(const char* fmt, Args... args) { write(Level::Info, fmt, args...); }
template <typename... Args>
void warn(const char* fmt, Args... args) { write(Level::Warn, fmt, args...); }
template <typename... Args>
void debug(const char* fmt, Args... args) { write(Level::Debug, fmt, args...); }

}  // namespace log
}  // namespace saor
