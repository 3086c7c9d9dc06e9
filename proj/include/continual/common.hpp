#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace continual {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Tensor/batch dimensions do not line up.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// A computation produced NaN/Inf or an otherwise unusable number.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// An input file does not match the expected on-disk format.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem trouble: missing file, short read, failed write.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// A metric was requested from an accuracy matrix that lacks the needed entries.
struct IncompleteMatrixError : std::runtime_error {
    explicit IncompleteMatrixError(const std::string& what) : std::runtime_error(what) {}
};

/// A metric needs reference accuracies that were never supplied.
struct MissingDataError : std::runtime_error {
    explicit MissingDataError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const char* what) {
    if (!cond) throw std::invalid_argument(what);
}

}  // namespace continual
