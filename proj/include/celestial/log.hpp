#pragma once

#include <iostream>
#include <string_view>

namespace celestial {

inline void log_warning(std::string_view message) {
  std::cerr << "celestial: warning: " << message << '\n';
}

inline void log_info(std::string_view message) { std::cerr << "celestial: " << message << '\n'; }

}  // namespace celestial
