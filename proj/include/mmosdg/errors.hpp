#pragma once

#include <stdexcept>
#include <string>

namespace mmosdg {

// Error categories map 1:1 onto CLI exit codes (validation=1, numeric=2, io=3).
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class validation_error : public error {
 public:
  using error::error;
};

class numeric_error : public error {
 public:
  using error::error;
};

class io_error : public error {
 public:
  using error::error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw validation_error(msg);
}

}  // namespace mmosdg
