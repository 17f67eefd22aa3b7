#ifndef DDVI_KERNELS_HPP
#define DDVI_KERNELS_HPP

// Squared-exponential (RBF) kernel with per-dimension lengthscales, jittered
// Cholesky factors, and zero-mean Gaussian log-densities.

#include <cmath>
#include <numbers>

#include "ddvi/common.hpp"
#include "ddvi/diffcore.hpp"

namespace ddvi::kernels
{

/// Hyperparameters held in log space: lengthscale_d = exp(log_lengthscales_d),
/// signal variance = exp(log_signal_variance).
struct KernelHyper
{
    Vector log_lengthscales;
    double log_signal_variance = 0.0;

    static KernelHyper unit(Index dim) { return {Vector::Zero(dim), 0.0}; }
    Index dim() const { return log_lengthscales.size(); }
    double signal_variance() const { return std::exp(log_signal_variance); }
};

/// Differentiable hyperparameters: (D x 1) log-lengthscales and (1 x 1) log variance.
struct KernelHyperVar
{
    ad::Var log_lengthscales;
    ad::Var log_signal_variance;

    Index dim() const { return log_lengthscales.rows(); }
};

/// k(a_i, b_j) = sf2 * exp(-0.5 * sum_d (a_id - b_jd)^2 / l_d^2) for row sets A, B.
template <typename DerivedA, typename DerivedB>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic>
rbf_gram(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b, const KernelHyper& hyper)
{
    using Scalar = typename DerivedA::Scalar;
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    if (a.cols() != b.cols() || a.cols() != hyper.dim())
        throw ShapeError(detail::concat("rbf_gram: point dims ", a.cols(), " and ", b.cols(), " vs ", hyper.dim(),
                                        " lengthscales"));
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_ls = (-hyper.log_lengthscales.array()).exp().matrix().template cast<Scalar>();
    const Mat as = a * inv_ls.asDiagonal();
    const Mat bs = b * inv_ls.asDiagonal();
    Mat d2 = (-2.0 * as * bs.transpose()).eval();
    d2.colwise() += as.rowwise().squaredNorm();
    d2.rowwise() += bs.rowwise().squaredNorm().transpose();
    return (Scalar(hyper.signal_variance()) * (-0.5 * d2.array().max(Scalar(0))).exp()).matrix();
}

/// Differentiable Gram matrix K(A, B) with gradients for A, B and the hypers.
ad::Var rbf_gram(const ad::Var& a, const ad::Var& b, const KernelHyperVar& hyper);

inline constexpr double default_base_jitter = 1e-6;
inline constexpr double max_jitter = 1e-2;

struct CholeskyResult
{
    ad::Var lower;
    double jitter_applied = 0.0;
};

/// L with L L^T = K + jitter I. Jitter starts at base_jitter and grows x10
/// until the factorization succeeds; beyond max(max_jitter, base_jitter) a NumericalError
/// reports the eigenvalue condition estimate of K.
CholeskyResult chol_with_jitter(const ad::Var& k, double base_jitter = default_base_jitter);

/// Plain-value counterpart of chol_with_jitter.
struct PlainCholesky
{
    Matrix lower;
    double jitter_applied = 0.0;
};
PlainCholesky chol_with_jitter(const Matrix& k, double base_jitter = default_base_jitter);

/// Sum over columns u_k of log N(u_k | 0, L L^T):
/// -0.5 ||L^{-1} u_k||^2 - sum log L_ii - (M/2) log 2 pi, via a triangular solve.
ad::Var gaussian_logpdf_zero_mean(const ad::Var& u, const ad::Var& lower);

template <typename DerivedU, typename DerivedL>
typename DerivedU::Scalar gaussian_logpdf_zero_mean(const Eigen::MatrixBase<DerivedU>& u,
                                                    const Eigen::MatrixBase<DerivedL>& lower)
{
    using Scalar = typename DerivedU::Scalar;
    if (lower.rows() != lower.cols() || lower.rows() != u.rows())
        throw ShapeError(detail::concat("gaussian_logpdf_zero_mean: u ", shape_str(u), " vs factor ",
                                        shape_str(lower)));
    using Plain = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const Plain whitened = lower.template triangularView<Eigen::Lower>().solve(Plain(u));
    const Scalar m = Scalar(u.rows());
    const Scalar logdet = lower.diagonal().array().log().sum();
    return Scalar(-0.5) * whitened.squaredNorm() - Scalar(u.cols()) * (logdet + Scalar(0.5) * m *
           std::log(Scalar(2) * std::numbers::pi_v<Scalar>));
}

} // namespace ddvi::kernels

#endif // DDVI_KERNELS_HPP
