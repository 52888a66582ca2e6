#include "debias/pca.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <string>

#include "debias/errors.hpp"

namespace debias {

PcaModel pca_fit(const Matrix& x, const PcaTarget& target) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (n < 2) throw precondition_error("pca_fit: need at least 2 samples, got " + std::to_string(n));
    if (d < 1) throw precondition_error("pca_fit: need at least 1 feature");
    if (const auto* r = std::get_if<RetainedDims>(&target)) {
        if (r->count < 1 || r->count > std::min(n, d))
            throw precondition_error("pca_fit: retained_dims " + std::to_string(r->count) + " outside [1, " +
                                     std::to_string(std::min(n, d)) + "]");
    } else {
        const double ratio = std::get<MinVarianceRatio>(target).ratio;
        if (!(ratio > 0.0 && ratio <= 1.0))
            throw precondition_error("pca_fit: variance ratio must lie in (0, 1]");
    }

    PcaModel model;
    model.mean = column_means(x);

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    Vector centered(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) centered[j] = x(i, j) - model.mean[j];
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b)
                cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += centered[a] * centered[b];
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            const auto ia = static_cast<Eigen::Index>(a);
            const auto ib = static_cast<Eigen::Index>(b);
            cov(ia, ib) /= static_cast<double>(n - 1);
            cov(ib, ia) = cov(ia, ib);
        }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw std::runtime_error("pca_fit: eigendecomposition failed");
    // Eigen returns ascending eigenvalues.
    const Eigen::VectorXd& evals = solver.eigenvalues();
    const Eigen::MatrixXd& evecs = solver.eigenvectors();

    model.eigenvalues.resize(d);
    double total = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        model.eigenvalues[k] = std::max(0.0, evals(static_cast<Eigen::Index>(d - 1 - k)));
        total += model.eigenvalues[k];
    }

    std::size_t keep = 0;
    if (const auto* r = std::get_if<RetainedDims>(&target)) {
        keep = r->count;
    } else if (total <= 0.0) {
        keep = 1;
    } else {
        const double want = std::get<MinVarianceRatio>(target).ratio;
        double acc = 0.0;
        const std::size_t limit = std::min(n, d);
        for (keep = 0; keep < limit;) {
            acc += model.eigenvalues[keep++];
            if (acc / total >= want - 1e-15) break;
        }
    }

    model.retained_dims = keep;
    if (total <= 0.0) {
        model.explained_variance_ratio = 1.0;
    } else {
        double acc = 0.0;
        for (std::size_t k = 0; k < keep; ++k) acc += model.eigenvalues[k];
        model.explained_variance_ratio = std::clamp(acc / total, 0.0, 1.0);
    }

    model.basis = Matrix(d, keep);
    for (std::size_t k = 0; k < keep; ++k) {
        const auto col = static_cast<Eigen::Index>(d - 1 - k);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < d; ++j)
            if (std::abs(evecs(static_cast<Eigen::Index>(j), col)) >
                std::abs(evecs(static_cast<Eigen::Index>(arg), col)) + 1e-12)
                arg = j;
        const double sign = evecs(static_cast<Eigen::Index>(arg), col) < 0.0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < d; ++j) model.basis(j, k) = sign * evecs(static_cast<Eigen::Index>(j), col);
    }
    return model;
}

Matrix pca_transform(const PcaModel& model, const Matrix& x) {
    if (x.cols() != model.input_dim())
        throw shape_error("pca_transform: input has " + std::to_string(x.cols()) + " columns, model expects " +
                          std::to_string(model.input_dim()));
    Matrix centered = x;
    for (std::size_t i = 0; i < centered.rows(); ++i) {
        auto r = centered.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] -= model.mean[j];
    }
    return matmul(centered, model.basis);
}

Matrix pca_inverse_transform(const PcaModel& model, const Matrix& z) {
    if (z.cols() != model.retained_dims)
        throw shape_error("pca_inverse_transform: expected " + std::to_string(model.retained_dims) + " columns");
    Matrix out = matmul_nt(z, model.basis);
    add_row_vector(out, model.mean);
    return out;
}

}  // namespace debias
