#pragma once

#include <cstddef>
#include <variant>

#include "debias/matrix.hpp"

namespace debias {

struct RetainedDims {
    std::size_t count;
};
struct MinVarianceRatio {
    double ratio;
};
using PcaTarget = std::variant<RetainedDims, MinVarianceRatio>;

struct PcaModel {
    Vector mean;                     // input dim
    Matrix basis;                    // input dim x retained dims, orthonormal columns
    Vector eigenvalues;              // all covariance eigenvalues, descending
    std::size_t retained_dims = 0;
    double explained_variance_ratio = 0.0;

    std::size_t input_dim() const noexcept { return mean.size(); }
};

// Principal components from the eigendecomposition of the sample covariance.
// Each basis column is sign-normalized so its largest-magnitude entry is
// positive, which makes the fit deterministic.
PcaModel pca_fit(const Matrix& x, const PcaTarget& target);

// (X - mean) · basis
Matrix pca_transform(const PcaModel& model, const Matrix& x);
// Z · basisᵀ + mean
Matrix pca_inverse_transform(const PcaModel& model, const Matrix& z);

}  // namespace debias
