#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace wadn {

// Row-major so that a row is one sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs violate a documented precondition (shape, range, support).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A numerical routine produced NaN/Inf or could not find a feasible point.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace log {

using Sink = std::function<void(const std::string&)>;

// Default sink writes "[wadn] warning: ..." to stderr.
void warn(const std::string& message);

// Returns the previous sink. Passing an empty function restores the default.
Sink set_warning_sink(Sink sink);

}  // namespace log

}  // namespace wadn
