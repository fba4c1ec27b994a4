#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace units {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;
using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (header, token, byte layout).
class FormatError : public Error {
 public:
  using Error::Error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class ParameterError : public Error {
 public:
  using Error::Error;
};
/// Operation invoked in the wrong lifecycle state (e.g. predict before fit).
class StateError : public Error {
 public:
  using Error::Error;
};
class NotFoundError : public Error {
 public:
  using Error::Error;
};
class VersionError : public Error {
 public:
  using Error::Error;
};
/// Non-finite loss, gradient or input value.
class NumericError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ParameterError(what);
}

}  // namespace units
