#include "wadn/common.hpp"

#include <iostream>
#include <mutex>
#include <utility>

namespace wadn::log {

namespace {

std::mutex g_mutex;
Sink g_sink;

}  // namespace

void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_mutex);
  if (g_sink) {
    g_sink(message);
    return;
  }
  std::cerr << "[wadn] warning: " << message << '\n';
}

Sink set_warning_sink(Sink sink) {
  std::lock_guard<std::mutex> lock(g_mutex);
  return std::exchange(g_sink, std::move(sink));
}

}  // namespace wadn::log
