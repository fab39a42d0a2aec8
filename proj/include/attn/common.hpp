#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace attn {

// Everything thrown by this library derives from attn::error. File-format
// problems get distinct types so callers can tell a corrupt header from a
// short read.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct shape_error : error {
  using error::error;
};

struct io_error : error {
  using error::error;
};

struct bad_magic_error : io_error {
  using io_error::io_error;
};

struct version_error : io_error {
  using io_error::io_error;
};

struct truncated_error : io_error {
  using io_error::io_error;
};

// Non-finite values where finite ones are required (NaN loss aborts, etc.).
struct numeric_error : error {
  using error::error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw error(msg);
}

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw shape_error(msg);
}

}  // namespace attn
