#include "cqs/log.hpp"

#include <cstdlib>
#include <iostream>

namespace cqs {

LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("CQS_LOG");
    if (!env) return LogLevel::Warn;
    const std::string v(env);
    if (v == "debug") return LogLevel::Debug;
    if (v == "info") return LogLevel::Info;
    if (v == "warn") return LogLevel::Warn;
    if (v == "error") return LogLevel::Error;
    if (v == "off") return LogLevel::Off;
    return LogLevel::Warn;
  }();
  return level;
}

void log_message(LogLevel level, const std::string& message) {
  if (level < log_level()) return;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::cerr << "[cqs:" << names[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace cqs
