#include "ddvi/kernels.hpp"

#include <algorithm>
#include <limits>

namespace ddvi::kernels
{

ad::Var rbf_gram(const ad::Var& a, const ad::Var& b, const KernelHyperVar& hyper)
{
    const Index dim = hyper.dim();
    if (a.cols() != b.cols() || a.cols() != dim || hyper.log_lengthscales.cols() != 1 ||
        hyper.log_signal_variance.rows() != 1 || hyper.log_signal_variance.cols() != 1)
        throw ShapeError(detail::concat("rbf_gram: points ", shape_str(a.value()), " and ", shape_str(b.value()),
                                        " with lengthscales ", shape_str(hyper.log_lengthscales.value())));

    const Vector inv_ls2 = (-2.0 * hyper.log_lengthscales.value().array()).exp().matrix();
    const double sf2 = std::exp(hyper.log_signal_variance.scalar());
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    const Matrix as = av * inv_ls2.cwiseSqrt().asDiagonal();
    const Matrix bs = bv * inv_ls2.cwiseSqrt().asDiagonal();
    Matrix d2 = -2.0 * as * bs.transpose();
    d2.colwise() += as.rowwise().squaredNorm();
    d2.rowwise() += bs.rowwise().squaredNorm().transpose();
    Matrix k = (sf2 * (-0.5 * d2.array().max(0.0)).exp()).matrix();

    const ad::Var log_ls = hyper.log_lengthscales;
    const ad::Var log_sf2 = hyper.log_signal_variance;
    return a.tape().record(
        ad::OpKind::rbf_gram, std::move(k), {a, b, log_ls, log_sf2},
        [a, b, log_ls, log_sf2, inv_ls2](ad::Tape& t, const Matrix& k, const Matrix& g) {
            const Matrix gk = g.cwiseProduct(k);
            const Vector row_sum = gk.rowwise().sum();
            const Vector col_sum = gk.colwise().sum().transpose();
            const Matrix& av = a.value();
            const Matrix& bv = b.value();
            if (t.requires_grad(a)) {
                Matrix ga = gk * bv - row_sum.asDiagonal() * av;
                t.accumulate(a, ga * inv_ls2.asDiagonal());
            }
            if (t.requires_grad(b)) {
                Matrix gb = gk.transpose() * av - col_sum.asDiagonal() * bv;
                t.accumulate(b, gb * inv_ls2.asDiagonal());
            }
            if (t.requires_grad(log_ls)) {
                // sum_ij gk_ij (a_id - b_jd)^2 / l_d^2
                const Vector a2 = av.array().square().matrix().transpose() * row_sum;
                const Vector b2 = bv.array().square().matrix().transpose() * col_sum;
                const Vector cross = (av.transpose() * gk * bv).diagonal();
                t.accumulate(log_ls, Matrix((a2 + b2 - 2.0 * cross).cwiseProduct(inv_ls2)));
            }
            if (t.requires_grad(log_sf2))
                t.accumulate(log_sf2, Matrix::Constant(1, 1, gk.sum()));
        });
}

namespace
{

double condition_estimate(const Matrix& k)
{
    const Matrix sym = 0.5 * (k + k.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(lo > 0.0))
        return std::numeric_limits<double>::infinity();
    return hi / lo;
}

// Smallest jitter in the escalation ladder for which K + jitter I factors.
double find_jitter(const Matrix& k, double base_jitter)
{
    if (k.rows() != k.cols())
        throw ShapeError(detail::concat("chol_with_jitter: expected square matrix, got ", shape_str(k)));
    if (!k.allFinite())
        throw NumericalError("chol_with_jitter: matrix has non-finite entries");
    if (!(base_jitter > 0.0))
        throw ValidationError("chol_with_jitter: base jitter must be positive");
    const Matrix sym = 0.5 * (k + k.transpose());
    const Matrix eye = Matrix::Identity(k.rows(), k.cols());
    const double ceiling = std::max(max_jitter, base_jitter);
    for (double jitter = base_jitter; jitter <= ceiling * (1.0 + 1e-9); jitter *= 10.0) {
        Eigen::LLT<Matrix> llt(sym + jitter * eye);
        if (llt.info() == Eigen::Success && Matrix(llt.matrixL()).allFinite())
            return jitter;
    }
    throw NumericalError(detail::concat("chol_with_jitter: ", shape_str(k), " matrix not positive definite at jitter ",
                                        ceiling, " (condition estimate ", condition_estimate(k), ")"));
}

} // namespace

CholeskyResult chol_with_jitter(const ad::Var& k, double base_jitter)
{
    const double jitter = find_jitter(k.value(), base_jitter);
    const ad::Var shifted = k + k.tape().constant(jitter * Matrix::Identity(k.rows(), k.cols()));
    return {ad::cholesky(shifted), jitter};
}

PlainCholesky chol_with_jitter(const Matrix& k, double base_jitter)
{
    const double jitter = find_jitter(k, base_jitter);
    const Matrix sym = 0.5 * (k + k.transpose()) + jitter * Matrix::Identity(k.rows(), k.cols());
    return {Matrix(Eigen::LLT<Matrix>(sym).matrixL()), jitter};
}

ad::Var gaussian_logpdf_zero_mean(const ad::Var& u, const ad::Var& lower)
{
    if (lower.rows() != lower.cols() || lower.rows() != u.rows())
        throw ShapeError(detail::concat("gaussian_logpdf_zero_mean: u ", shape_str(u.value()), " vs factor ",
                                        shape_str(lower.value())));
    const double m = static_cast<double>(u.rows());
    const double k = static_cast<double>(u.cols());
    const ad::Var whitened = ad::solve_lower(lower, u);
    const ad::Var quad = ad::sum(ad::square(whitened));
    const ad::Var logdet = ad::sum(ad::log(ad::diag(lower)));
    return (-0.5 * quad - k * logdet) - k * 0.5 * m * std::log(2.0 * std::numbers::pi);
}

} // namespace ddvi::kernels
