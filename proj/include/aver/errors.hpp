#pragma once

// Error conventions used across the library:
//   std::invalid_argument  -> contract violations (bad shapes, bad modes, bad values)
//   std::runtime_error     -> environment failures (I/O, corrupt files)

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aver {
namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] inline void fail(Args&&... args) {
  throw std::invalid_argument(detail::cat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] inline void fail_io(Args&&... args) {
  throw std::runtime_error(detail::cat(std::forward<Args>(args)...));
}

template <typename... Args>
inline void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace aver
