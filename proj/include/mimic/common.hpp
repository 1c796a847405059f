#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mimic {

template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVecX = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = MatX<float>;
using VecF = VecX<float>;
using MatD = MatX<double>;
using VecD = VecX<double>;

/// Machine-readable failure categories, mirrored in CLI exit codes.
enum class ErrorCategory {
  config = 2,      // bad/unknown configuration
  contract = 3,    // precondition on data violated
  numeric = 4,     // non-finite values in compute
  ingestion = 5,   // unreadable/corrupt input files
  parameter = 6,   // out-of-range scalar argument
  dependency = 7,  // missing upstream stage artifact
  aborted = 8,     // training aborted mid-run
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::contract: return "contract";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::ingestion: return "ingestion";
    case ErrorCategory::parameter: return "parameter";
    case ErrorCategory::dependency: return "dependency";
    case ErrorCategory::aborted: return "aborted";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg) : std::runtime_error(msg), cat_(cat) {}
  ErrorCategory category() const { return cat_; }

 private:
  ErrorCategory cat_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error(ErrorCategory::contract, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorCategory::numeric, m) {}
};
struct IngestionError : Error {
  explicit IngestionError(const std::string& m) : Error(ErrorCategory::ingestion, m) {}
};
struct ParameterError : Error {
  explicit ParameterError(const std::string& m) : Error(ErrorCategory::parameter, m) {}
};
struct DependencyError : Error {
  explicit DependencyError(const std::string& m) : Error(ErrorCategory::dependency, m) {}
};
struct TrainingAborted : Error {
  explicit TrainingAborted(const std::string& m) : Error(ErrorCategory::aborted, m) {}
};

}  // namespace mimic
