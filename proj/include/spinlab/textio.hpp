#pragma once

#include <charconv>
#include <cstdio>
#include <span>
#include <string>

namespace spinlab {

// 17-significant-digit decimal form; parses back to the identical bits.
// Locale-independent.
inline std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::string format_double_array(std::span<const double> values) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ", ";
    out += format_double(values[i]);
  }
  out += "]";
  return out;
}

}  // namespace spinlab
