#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vilds {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
  using Error::Error;
};

class ShapeMismatch : public Error {
public:
  using Error::Error;
};

class CapExceeded : public Error {
public:
  using Error::Error;
};

class InvalidParams : public Error {
public:
  using Error::Error;
};

class InvalidWindow : public Error {
public:
  using Error::Error;
};

class NegativeCount : public Error {
public:
  using Error::Error;
};

class TapeMissing : public Error {
public:
  using Error::Error;
};

/// File missing, unreadable, or malformed.
class IoError : public Error {
public:
  using Error::Error;
};

class NonFiniteObjective : public Error {
public:
  NonFiniteObjective(const std::string& what, int last_good_epoch)
      : Error(what), last_good_epoch_(last_good_epoch) {}
  int last_good_epoch() const noexcept { return last_good_epoch_; }

private:
  int last_good_epoch_;
};

/// The Schur complement at time block `block` was not positive definite.
class NotPositiveDefinite : public Error {
public:
  explicit NotPositiveDefinite(std::size_t block)
      : Error("matrix not positive definite at block " + std::to_string(block)),
        block_(block) {}
  std::size_t block() const noexcept { return block_; }

private:
  std::size_t block_;
};

namespace detail {
inline void require_dim(bool ok, const char* what) {
  if (!ok) throw DimensionMismatch(what);
}
}  // namespace detail

}  // namespace vilds
