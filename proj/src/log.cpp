#include "fewshot/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace fewshot::log {
namespace {
std::atomic<bool> g_verbose{false};
std::mutex g_mutex;
}  // namespace

void set_verbose(bool on) { g_verbose = on; }
bool verbose() { return g_verbose; }

void info(const std::string& message) {
  if (!g_verbose) return;
  std::lock_guard lock(g_mutex);
  std::cerr << message << '\n';
}

}  // namespace fewshot::log
