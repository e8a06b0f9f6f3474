#pragma once

#include <iostream>
#include <string>

namespace pacn {

namespace detail {
inline bool& quiet_flag() {
  static bool quiet = false;
  return quiet;
}
}  // namespace detail

inline void set_quiet(bool quiet) { detail::quiet_flag() = quiet; }
inline bool is_quiet() { return detail::quiet_flag(); }

inline void log_info(const std::string& msg) {
  if (!is_quiet()) std::cerr << msg << "\n";
}

inline void log_warning(const std::string& msg) {
  if (!is_quiet()) std::cerr << "warning: " << msg << "\n";
}

}  // namespace pacn
