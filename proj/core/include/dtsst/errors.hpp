#pragma once

#include <stdexcept>
#include <string>

namespace dtsst {

// Root of the library's exception hierarchy. The CLI maps each subclass onto
// a process exit code, so keep the split meaningful.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents or an impossible layer geometry.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed input data: bad files, invalid labels, out-of-range settings.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or a failed numerical self-check.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff tape (non-scalar loss, freed graph).
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace dtsst
