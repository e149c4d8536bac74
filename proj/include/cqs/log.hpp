#pragma once

#include <string>

namespace cqs {

enum class LogLevel { Debug = 0, Info, Warn, Error, Off };

// Parsed once from the CQS_LOG environment variable (debug|info|warn|error|off).
// Default is warn.
LogLevel log_level();

void log_message(LogLevel level, const std::string& message);

inline void log_debug(const std::string& m) { log_message(LogLevel::Debug, m); }
inline void log_info(const std::string& m) { log_message(LogLevel::Info, m); }
inline void log_warn(const std::string& m) { log_message(LogLevel::Warn, m); }
inline void log_error(const std::string& m) { log_message(LogLevel::Error, m); }

}  // namespace cqs
