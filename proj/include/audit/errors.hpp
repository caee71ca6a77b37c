#pragma once

#include <stdexcept>
#include <string>

namespace audit {

// Exit-code conventions used by the CLI:
//   0 success, 2 validation, 3 backend/transport, 4 IO.

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// KL-family divergence requested on distributions with unmatched support
// and smoothing disabled.
class DivergenceError : public ValidationError {
 public:
  explicit DivergenceError(const std::string& what) : ValidationError(what) {}
};

class BackendError : public std::runtime_error {
 public:
  BackendError(const std::string& what, int http_status = 0)
      : std::runtime_error(what), status_(http_status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// Connection-level failure (unreachable host, timeout, exhausted retries).
class TransportError : public BackendError {
 public:
  explicit TransportError(const std::string& what) : BackendError(what, 0) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace audit
