#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace seqvar {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
// Row-major storage for particle arrays (one particle per row).
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Invalid parameters or dimensions supplied by the caller.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A numerical failure during a computation (non-finite values, collapse).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A natural-parameter sum left the positive-definite cone.
class DegenerateKernelError : public NumericError {
 public:
  using NumericError::NumericError;
};

// All importance weights underflowed.
class WeightDegeneracyError : public NumericError {
 public:
  using NumericError::NumericError;
};

// A file could not be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ParameterError(what);
}

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want) {
    throw ParameterError(std::string(what) + ": dimension mismatch (got " + std::to_string(got) +
                         ", expected " + std::to_string(want) + ")");
  }
}

}  // namespace seqvar
