#pragma once

#include <functional>
#include <string>

namespace ibn {

enum class LogLevel { Debug, Info, Warning, Error };

void log(LogLevel level, const std::string &message);
inline void log_info(const std::string &message) { log(LogLevel::Info, message); }
inline void log_warning(const std::string &message) { log(LogLevel::Warning, message); }

/// Messages below this level are dropped. Default: Warning.
void set_log_level(LogLevel level);

/// Replaces the stderr sink; pass an empty function to restore it.
void set_log_sink(std::function<void(LogLevel, const std::string &)> sink);

} // namespace ibn
