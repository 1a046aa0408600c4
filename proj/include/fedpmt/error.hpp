#pragma once

#include <stdexcept>
#include <string>

namespace fedpmt {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Layer shapes do not compose, or an input does not match the model.
struct ShapeError : Error {
  ShapeError(const std::string& what, std::size_t layer_index)
      : Error(what), layer(layer_index) {}
  std::size_t layer;
};

struct ConfigError : Error {
  using Error::Error;
};

// IDX ingestion failures, one type per failure mode.
struct IdxBadMagicError : Error {
  using Error::Error;
};
struct IdxTruncatedError : Error {
  using Error::Error;
};
struct IdxCountMismatchError : Error {
  using Error::Error;
};

// Non-IID partitioning ran out of samples for a class.
struct ClassExhaustedError : Error {
  ClassExhaustedError(const std::string& what, int class_id_)
      : Error(what), class_id(class_id_) {}
  int class_id;
};

// The convex lab detected a diverging run.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace fedpmt
