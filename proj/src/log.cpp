#include "vitmae/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace vitmae {

namespace {
std::atomic<LogLevel> g_level{LogLevel::kWarning};
std::mutex g_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warning(std::string_view message) {
  if (g_level < LogLevel::kWarning) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "warning: " << message << '\n';
}

void log_info(std::string_view message) {
  if (g_level < LogLevel::kInfo) return;
  std::lock_guard lock(g_mutex);
  std::cerr << message << '\n';
}

}  // namespace vitmae
