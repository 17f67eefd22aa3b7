#include "ddvi/elbo.hpp"

#include <cmath>
#include <numbers>

#include "ddvi/diffusion.hpp"
#include "ddvi/gplayers.hpp"
#include "ddvi/random.hpp"

namespace ddvi::elbo
{

namespace
{

constexpr double log_two_pi = 1.8378770664093453;

void check_batch(const Matrix& x, const Matrix& y, Index n_total, Index n_mc)
{
    if (x.rows() < 1 || x.rows() != y.rows() || y.cols() != 1)
        throw ShapeError(detail::concat("bound: inputs ", shape_str(x), " vs targets ", shape_str(y)));
    if (n_total < x.rows())
        throw ValidationError(detail::concat("bound: n_total = ", n_total, " below batch size ", x.rows()));
    if (n_mc < 1)
        throw ValidationError("bound: n_mc must be >= 1");
}

Matrix one_hot(const Matrix& y, Index classes)
{
    Matrix out = Matrix::Zero(y.rows(), classes);
    for (Index i = 0; i < y.rows(); ++i) {
        const double label = y(i, 0);
        const auto c = static_cast<Index>(std::llround(label));
        if (!(label == static_cast<double>(c)) || c < 0 || c >= classes)
            throw ValidationError(detail::concat("label ", label, " at row ", i, " outside 0..", classes - 1));
        out(i, c) = 1.0;
    }
    return out;
}

ad::Var noise_var_or_throw(LikelihoodKind kind, const ad::Var& log_noise_variance)
{
    if (kind != LikelihoodKind::softmax && !log_noise_variance.valid())
        throw ValidationError("likelihood '" + to_string(kind) + "' needs a noise variance");
    return log_noise_variance;
}

Matrix kzz_plus_jitter(const Matrix& z, const kernels::KernelHyper& hyper, double jitter)
{
    Matrix k = kernels::rbf_gram(z, z, hyper);
    k.diagonal().array() += jitter;
    return k;
}

} // namespace

ElboBreakdown ElboTerms::values() const
{
    return {prior.scalar(), likelihood.scalar(), l1.scalar(), fix.scalar(), total.scalar(), n_mc};
}

ad::Var log_likelihood(LikelihoodKind kind, const ad::Var& f, const Matrix& y, const ad::Var& log_noise_variance)
{
    if (f.rows() != y.rows() || y.cols() != 1)
        throw ShapeError(detail::concat("log_likelihood: f ", shape_str(f.value()), " vs y ", shape_str(y)));
    ad::Tape& tape = f.tape();
    const Index b = f.rows();
    if (kind == LikelihoodKind::softmax)
        return ad::sum(ad::mul(ad::log_softmax(f), tape.constant(one_hot(y, f.cols()))));

    if (f.cols() != 1)
        throw ShapeError("log_likelihood: scalar outputs expected for a Gaussian likelihood");
    const ad::Var lnv = noise_var_or_throw(kind, log_noise_variance);
    const ad::Var inv = ad::broadcast(ad::exp(-lnv), b, 1);
    const ad::Var yc = tape.constant(y);
    const ad::Var norm = ad::scale(ad::shift(lnv, log_two_pi), -0.5 * static_cast<double>(b));
    if (kind == LikelihoodKind::gaussian)
        return ad::scale(ad::sum(ad::mul(ad::square(f - yc), inv)), -0.5) + norm;

    const ad::Var plus = ad::scale(ad::mul(ad::square(f - yc), inv), -0.5);
    const ad::Var minus = ad::scale(ad::mul(ad::square(f + yc), inv), -0.5);
    return ad::sum(ad::logaddexp(plus, minus)) + norm - std::numbers::ln2 * static_cast<double>(b);
}

Vector log_likelihood_rows(LikelihoodKind kind, const Matrix& f, const Matrix& y, double noise_variance)
{
    if (f.rows() != y.rows() || y.cols() != 1)
        throw ShapeError(detail::concat("log_likelihood_rows: f ", shape_str(f), " vs y ", shape_str(y)));
    Vector out(f.rows());
    if (kind == LikelihoodKind::softmax) {
        const Matrix hot = one_hot(y, f.cols());
        for (Index i = 0; i < f.rows(); ++i) {
            const double mx = f.row(i).maxCoeff();
            const double lse = mx + std::log((f.row(i).array() - mx).exp().sum());
            out(i) = f.row(i).dot(hot.row(i)) - lse;
        }
        return out;
    }
    if (f.cols() != 1)
        throw ShapeError("log_likelihood_rows: scalar outputs expected for a Gaussian likelihood");
    if (!(noise_variance > 0.0))
        throw ValidationError("log_likelihood_rows: noise variance must be positive");
    const double norm = -0.5 * (log_two_pi + std::log(noise_variance));
    for (Index i = 0; i < f.rows(); ++i) {
        const double a = -0.5 * (y(i, 0) - f(i, 0)) * (y(i, 0) - f(i, 0)) / noise_variance;
        if (kind == LikelihoodKind::gaussian) {
            out(i) = a + norm;
        } else {
            const double b = -0.5 * (y(i, 0) + f(i, 0)) * (y(i, 0) + f(i, 0)) / noise_variance;
            const double mx = std::max(a, b);
            out(i) = mx + std::log(std::exp(a - mx) + std::exp(b - mx)) - std::numbers::ln2 + norm;
        }
    }
    return out;
}

ElboTerms ddvi_elbo(const BoundModel& model, const ModelSpec& spec, const Matrix& x, const Matrix& y,
                    Index n_total, Index n_mc, std::uint64_t seed)
{
    check_batch(x, y, n_total, n_mc);
    if (spec.method != Method::ddvi)
        throw ValidationError("ddvi_elbo: model was built for " + to_string(spec.method));
    ad::Tape& tape = model.layers.front().inducing.tape();
    const gp::DgpArchitecture& arch = spec.arch;
    const diffusion::DiffusionSchedule& sched = spec.schedule;
    const Index h = arch.flat_dim();
    const double inv_k = 1.0 / static_cast<double>(n_mc);
    const double scale_n = static_cast<double>(n_total) / static_cast<double>(x.rows());

    std::vector<NormalStream> streams;
    streams.reserve(static_cast<std::size_t>(n_mc));
    for (Index k = 0; k < n_mc; ++k)
        streams.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(k)));

    const diffusion::ScoreModel score = diffusion::ScoreModel::network(model.score, sched);
    const diffusion::ReverseTrajectory traj = diffusion::simulate_reverse(tape, score, h, streams);
    const ad::Var& terminal = traj.terminal();

    ElboTerms terms;
    terms.n_mc = n_mc;
    terms.l1 = ad::scale(ad::sum(diffusion::path_kl(traj, sched)), inv_k);
    terms.fix = ad::shift(ad::scale(ad::sum(ad::square(terminal)), -0.5 * inv_k / sched.sigma2_fix),
                          -0.5 * static_cast<double>(h) * (log_two_pi + std::log(sched.sigma2_fix)));

    const std::vector<ad::Var> lowers = gp::factor_inducing(model.layers, spec.jitter);
    const ad::Var xc = tape.constant(x);
    ad::Var prior;
    ad::Var lik;
    for (Index k = 0; k < n_mc; ++k) {
        const gp::PosteriorDraw draw(ad::slice(terminal, 0, k, h, 1), arch);
        const ad::Var p = gp::dgp_prior_logp(draw, lowers);
        const gp::Propagation prop =
            gp::propagate(xc, draw, model.layers, lowers, &streams[static_cast<std::size_t>(k)]);
        const ad::Var l = log_likelihood(spec.likelihood, prop.output(), y, model.log_noise_variance);
        prior = k == 0 ? p : prior + p;
        lik = k == 0 ? l : lik + l;
    }
    terms.prior = ad::scale(prior, inv_k);
    terms.likelihood = ad::scale(lik, scale_n * inv_k);
    terms.total = terms.prior + terms.likelihood - terms.l1 - terms.fix;
    return terms;
}

ad::Var gaussian_kl(const ad::Var& mean, const std::vector<ad::Var>& q_factors, const ad::Var& prior_lower)
{
    const Index m = prior_lower.rows();
    const Index d = mean.cols();
    if (mean.rows() != m || static_cast<Index>(q_factors.size()) != d)
        throw ShapeError(detail::concat("gaussian_kl: mean ", shape_str(mean.value()), ", ", q_factors.size(),
                                        " factors, prior ", shape_str(prior_lower.value())));
    const ad::Var quad = ad::sum(ad::square(ad::solve_lower(prior_lower, mean)));
    const ad::Var logdet_k = ad::scale(ad::sum(ad::log(ad::diag(prior_lower))), 2.0 * static_cast<double>(d));
    ad::Var acc = quad + logdet_k;
    for (const ad::Var& factor : q_factors) {
        if (factor.rows() != m || factor.cols() != m)
            throw ShapeError("gaussian_kl: q factor " + shape_str(factor.value()));
        const ad::Var lower = ad::tril(factor);
        acc = acc + ad::sum(ad::square(ad::solve_lower(prior_lower, lower)));
        acc = acc - ad::sum(ad::log(ad::square(ad::diag(lower))));
    }
    return ad::scale(ad::shift(acc, -static_cast<double>(m * d)), 0.5);
}

ElboTerms dsvi_elbo(const BoundModel& model, const ModelSpec& spec, const Matrix& x, const Matrix& y,
                    Index n_total, Index n_mc, std::uint64_t seed)
{
    check_batch(x, y, n_total, n_mc);
    if (spec.method != Method::dsvi)
        throw ValidationError("dsvi_elbo: model was built for " + to_string(spec.method));
    ad::Tape& tape = model.layers.front().inducing.tape();
    const gp::DgpArchitecture& arch = spec.arch;
    const Index m = arch.num_inducing;
    const double inv_k = 1.0 / static_cast<double>(n_mc);
    const double scale_n = static_cast<double>(n_total) / static_cast<double>(x.rows());

    const std::vector<ad::Var> lowers = gp::factor_inducing(model.layers, spec.jitter);
    std::vector<std::vector<ad::Var>> tri(model.dsvi_factors.size());
    ad::Var kl;
    for (std::size_t l = 0; l < model.dsvi_factors.size(); ++l) {
        for (const ad::Var& f : model.dsvi_factors[l])
            tri[l].push_back(ad::tril(f));
        const ad::Var layer_kl = gaussian_kl(model.dsvi_means[l], model.dsvi_factors[l], lowers[l]);
        kl = l == 0 ? layer_kl : kl + layer_kl;
    }

    const ad::Var xc = tape.constant(x);
    ad::Var lik;
    for (Index k = 0; k < n_mc; ++k) {
        NormalStream stream(derive_seed(seed, static_cast<std::uint64_t>(k)));
        std::vector<ad::Var> views;
        for (Index l = 0; l < arch.layers(); ++l) {
            const auto li = static_cast<std::size_t>(l);
            std::vector<ad::Var> cols;
            for (Index d = 0; d < arch.out_dim(l); ++d) {
                const ad::Var eps = tape.constant(stream.matrix(m, 1));
                cols.push_back(ad::slice(model.dsvi_means[li], 0, d, m, 1) +
                               ad::matmul(tri[li][static_cast<std::size_t>(d)], eps));
            }
            views.push_back(ad::concat_cols(cols));
        }
        const gp::PosteriorDraw draw = gp::PosteriorDraw::from_layers(std::move(views));
        const gp::Propagation prop = gp::propagate(xc, draw, model.layers, lowers, &stream);
        const ad::Var l = log_likelihood(spec.likelihood, prop.output(), y, model.log_noise_variance);
        lik = k == 0 ? l : lik + l;
    }

    ElboTerms terms;
    terms.n_mc = n_mc;
    terms.prior = -kl;
    terms.likelihood = ad::scale(lik, scale_n * inv_k);
    terms.l1 = tape.constant(Matrix::Zero(1, 1));
    terms.fix = tape.constant(Matrix::Zero(1, 1));
    terms.total = terms.likelihood - kl;
    return terms;
}

ElboTerms evaluate_bound(const BoundModel& model, const ModelSpec& spec, const Matrix& x, const Matrix& y,
                         Index n_total, Index n_mc, std::uint64_t seed)
{
    return spec.method == Method::ddvi ? ddvi_elbo(model, spec, x, y, n_total, n_mc, seed)
                                       : dsvi_elbo(model, spec, x, y, n_total, n_mc, seed);
}

ElboBreakdown evaluate_bound(const DgpModel& model, const Matrix& x, const Matrix& y, Index n_total, Index n_mc,
                             std::uint64_t seed)
{
    ad::Tape tape;
    const BoundModel constants = bind_constants(tape, model);
    return evaluate_bound(constants, model.spec(), x, y, n_total, n_mc, seed).values();
}

// ---------------------------------------------------------------------------

ExactGaussianPosterior exact_gaussian_posterior(const Matrix& x, const Vector& y, const Matrix& z,
                                                const kernels::KernelHyper& hyper, double noise_variance,
                                                double jitter)
{
    if (x.rows() != y.size())
        throw ShapeError("exact_gaussian_posterior: x and y row counts differ");
    if (!(noise_variance > 0.0))
        throw ValidationError("exact_gaussian_posterior: noise variance must be positive");
    const Index n = x.rows();
    const Matrix kzz = kzz_plus_jitter(z, hyper, jitter);
    const Matrix kxz = kernels::rbf_gram(x, z, hyper);
    const Matrix kxx = kernels::rbf_gram(x, x, hyper);
    const Eigen::LLT<Matrix> kzz_llt(kzz);
    if (kzz_llt.info() != Eigen::Success)
        throw NumericalError("exact_gaussian_posterior: K_ZZ not positive definite");
    const Matrix a = kzz_llt.solve(kxz.transpose()).transpose();
    Matrix c = kxx - a * kxz.transpose();
    c = 0.5 * (c + c.transpose()).eval();
    c.diagonal().array() += noise_variance;
    const Eigen::LLT<Matrix> c_llt(c);
    if (c_llt.info() != Eigen::Success)
        throw NumericalError("exact_gaussian_posterior: conditional covariance not positive definite");

    Matrix precision = kzz_llt.solve(Matrix::Identity(z.rows(), z.rows())) + a.transpose() * c_llt.solve(a);
    precision = 0.5 * (precision + precision.transpose()).eval();
    const Eigen::LLT<Matrix> p_llt(precision);
    if (p_llt.info() != Eigen::Success)
        throw NumericalError("exact_gaussian_posterior: posterior precision not positive definite");

    ExactGaussianPosterior out;
    out.covariance = p_llt.solve(Matrix::Identity(z.rows(), z.rows()));
    out.mean = out.covariance * (a.transpose() * c_llt.solve(y));

    Matrix marg = kxx;
    marg.diagonal().array() += noise_variance;
    const Eigen::LLT<Matrix> m_llt(marg);
    if (m_llt.info() != Eigen::Success)
        throw NumericalError("exact_gaussian_posterior: marginal covariance not positive definite");
    const Vector white = m_llt.matrixL().solve(y);
    const double logdet = 2.0 * m_llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    out.log_marginal = -0.5 * white.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(n) * log_two_pi;
    return out;
}

GaussianQ optimal_conjugate_q(const Matrix& x, const Vector& y, const Matrix& z, const kernels::KernelHyper& hyper,
                              double noise_variance, double jitter)
{
    if (x.rows() != y.size())
        throw ShapeError("optimal_conjugate_q: x and y row counts differ");
    const Matrix kzz = kzz_plus_jitter(z, hyper, jitter);
    const Matrix kzx = kernels::rbf_gram(z, x, hyper);
    Matrix sigma = kzz + kzx * kzx.transpose() / noise_variance;
    sigma = 0.5 * (sigma + sigma.transpose()).eval();
    const Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw NumericalError("optimal_conjugate_q: Sigma not positive definite");
    GaussianQ q;
    q.mean = kzz * llt.solve(kzx * y) / noise_variance;
    q.covariance = kzz * llt.solve(kzz);
    q.covariance = 0.5 * (q.covariance + q.covariance.transpose()).eval();
    return q;
}

double expected_dsvi_bound(const Matrix& x, const Vector& y, const Matrix& z, const kernels::KernelHyper& hyper,
                           double noise_variance, const GaussianQ& q, double jitter)
{
    const Index m = z.rows();
    const Matrix kzz = kzz_plus_jitter(z, hyper, jitter);
    const Eigen::LLT<Matrix> llt(kzz);
    if (llt.info() != Eigen::Success)
        throw NumericalError("expected_dsvi_bound: K_ZZ not positive definite");
    const Matrix kxz = kernels::rbf_gram(x, z, hyper);
    const Matrix a = llt.solve(kxz.transpose()).transpose();
    const double sf2 = hyper.signal_variance();

    double lik = 0.0;
    for (Index i = 0; i < x.rows(); ++i) {
        const double cond_var = std::max(sf2 - a.row(i).dot(kxz.row(i)), gp::variance_floor);
        const double mean = a.row(i).dot(q.mean);
        const double spread = a.row(i) * q.covariance * a.row(i).transpose();
        const double r = y(i) - mean;
        lik += -0.5 * (log_two_pi + std::log(noise_variance)) - 0.5 * (r * r + spread + cond_var) / noise_variance;
    }

    const Matrix lk = llt.matrixL();
    const Eigen::LLT<Matrix> q_llt(q.covariance);
    if (q_llt.info() != Eigen::Success)
        throw NumericalError("expected_dsvi_bound: q covariance not positive definite");
    const Matrix ls = q_llt.matrixL();
    const Matrix w = lk.triangularView<Eigen::Lower>().solve(ls);
    const Vector wm = lk.triangularView<Eigen::Lower>().solve(q.mean);
    const double kl = 0.5 * (w.squaredNorm() + wm.squaredNorm() - static_cast<double>(m) +
                             2.0 * lk.diagonal().array().log().sum() - 2.0 * ls.diagonal().array().log().sum());
    return lik - kl;
}

} // namespace ddvi::elbo
