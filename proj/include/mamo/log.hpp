#pragma once

#include <atomic>
#include <iostream>
#include <string>

namespace mamo {

inline std::atomic<bool>& warnings_enabled() {
  static std::atomic<bool> on{true};
  return on;
}

inline void log_warning(const std::string& msg) {
  if (warnings_enabled()) std::clog << "warning: " << msg << '\n';
}

}  // namespace mamo
