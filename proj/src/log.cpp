#include "ibnorm/log.hpp"

#include <iostream>
#include <mutex>

namespace ibn {

namespace {
std::mutex g_mutex;
LogLevel g_level = LogLevel::Warning;
std::function<void(LogLevel, const std::string &)> g_sink;

const char *level_name(LogLevel level) {
    switch (level) {
    case LogLevel::Debug:
        return "debug";
    case LogLevel::Info:
        return "info";
    case LogLevel::Warning:
        return "warning";
    case LogLevel::Error:
        return "error";
    }
    return "?";
}
} // namespace

void log(LogLevel level, const std::string &message) {
    std::lock_guard lock(g_mutex);
    if (level < g_level)
        return;
    if (g_sink)
        g_sink(level, message);
    else
        std::cerr << "[" << level_name(level) << "] " << message << '\n';
}

void set_log_level(LogLevel level) {
    std::lock_guard lock(g_mutex);
    g_level = level;
}

void set_log_sink(std::function<void(LogLevel, const std::string &)> sink) {
    std::lock_guard lock(g_mutex);
    g_sink = std::move(sink);
}

} // namespace ibn
