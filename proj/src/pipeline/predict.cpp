#include "ddvi/pipeline/predict.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddvi/diffusion.hpp"
#include "ddvi/elbo.hpp"
#include "ddvi/random.hpp"

namespace ddvi::pipeline
{

namespace
{

constexpr std::uint64_t layer_noise_stream = 0x1A7E2;

} // namespace

Matrix posterior_draws(const DgpModel& model, Index n, std::uint64_t seed)
{
    if (n < 1)
        throw ValidationError("posterior_draws: need at least one draw");
    const ModelSpec& spec = model.spec();
    const gp::DgpArchitecture& arch = spec.arch;
    ad::Tape tape;
    const BoundModel bound = bind_constants(tape, model);
    if (spec.method == Method::ddvi) {
        const diffusion::ScoreModel score = diffusion::ScoreModel::network(bound.score, spec.schedule);
        return diffusion::simulate_reverse(tape, score, arch.flat_dim(), n, seed).terminal().value();
    }
    Matrix out(arch.flat_dim(), n);
    const Index m = arch.num_inducing;
    for (Index k = 0; k < n; ++k) {
        NormalStream stream(derive_seed(seed, static_cast<std::uint64_t>(k)));
        for (Index l = 0; l < arch.layers(); ++l) {
            const auto li = static_cast<std::size_t>(l);
            for (Index d = 0; d < arch.out_dim(l); ++d) {
                const Matrix& mean = bound.dsvi_means[li].value();
                const Matrix lower = bound.dsvi_factors[li][static_cast<std::size_t>(d)]
                                         .value()
                                         .triangularView<Eigen::Lower>();
                out.block(arch.offset(l) + d * m, k, m, 1) = mean.col(d) + lower * stream.matrix(m, 1);
            }
        }
    }
    return out;
}

Prediction predict(const DgpModel& model, const Matrix& x, Index n_samples, std::uint64_t seed)
{
    const ModelSpec& spec = model.spec();
    if (x.cols() != spec.arch.input_dim)
        throw ShapeError(detail::concat("predict: inputs have ", x.cols(), " features, model expects ",
                                        spec.arch.input_dim));
    const Matrix draws = posterior_draws(model, n_samples, seed);
    Prediction pred;
    ad::Tape tape;
    const BoundModel bound = bind_constants(tape, model);
    const std::vector<ad::Var> lowers = gp::factor_inducing(bound.layers, spec.jitter);
    const ad::Var xc = tape.constant(x);
    const bool classify = spec.arch.task == gp::Task::classification;
    if (classify)
        pred.probabilities = Matrix::Zero(x.rows(), spec.arch.output_dim());
    for (Index k = 0; k < n_samples; ++k) {
        NormalStream noise(derive_seed(derive_seed(seed, layer_noise_stream), static_cast<std::uint64_t>(k)));
        const gp::PosteriorDraw draw(tape.constant(draws.col(k)), spec.arch);
        const Matrix f = gp::propagate(xc, draw, bound.layers, lowers, &noise).output().value();
        if (classify) {
            Matrix p = (f.colwise() - f.rowwise().maxCoeff()).array().exp().matrix();
            p.array().colwise() /= p.rowwise().sum().array();
            pred.probabilities += p;
        }
        pred.samples.push_back(f);
    }
    const double inv = 1.0 / static_cast<double>(n_samples);
    pred.mean = Matrix::Zero(x.rows(), spec.arch.output_dim());
    for (const Matrix& f : pred.samples)
        pred.mean += f;
    pred.mean *= inv;
    if (classify) {
        pred.probabilities *= inv;
    } else {
        pred.noise_variance = std::exp(bound.log_noise_variance.scalar());
        pred.variance = Matrix::Constant(x.rows(), 1, pred.noise_variance);
        for (const Matrix& f : pred.samples)
            pred.variance += inv * (f - pred.mean).cwiseAbs2();
    }
    return pred;
}

double rmse(const Matrix& mean, const Matrix& y)
{
    if (mean.rows() != y.rows() || mean.cols() != 1 || y.cols() != 1)
        throw ShapeError(detail::concat("rmse: predictions ", shape_str(mean), " vs targets ", shape_str(y)));
    return std::sqrt((mean - y).squaredNorm() / static_cast<double>(y.rows()));
}

double log_mean_exp_nll(const Matrix& logp)
{
    if (logp.size() == 0)
        throw ShapeError("nll: no samples");
    double total = 0.0;
    for (Index i = 0; i < logp.cols(); ++i) {
        const double mx = logp.col(i).maxCoeff();
        const double lme = mx + std::log((logp.col(i).array() - mx).exp().mean());
        total -= lme;
    }
    return total / static_cast<double>(logp.cols());
}

double accuracy(const Matrix& probabilities, const Matrix& labels)
{
    if (probabilities.rows() != labels.rows())
        throw ShapeError("accuracy: row counts differ");
    Index hits = 0;
    for (Index i = 0; i < labels.rows(); ++i) {
        Index arg = 0;
        probabilities.row(i).maxCoeff(&arg);
        hits += static_cast<double>(arg) == labels(i, 0) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.rows());
}

double auc(const Vector& scores, const Matrix& labels)
{
    if (scores.size() != labels.rows())
        throw ShapeError("auc: scores and labels differ in length");
    const Index n = scores.size();
    Index pos = 0;
    for (Index i = 0; i < n; ++i) {
        if (labels(i, 0) != 0.0 && labels(i, 0) != 1.0)
            throw ValidationError(detail::concat("auc: binary labels required, got ", labels(i, 0)));
        pos += labels(i, 0) == 1.0 ? 1 : 0;
    }
    if (pos == 0 || pos == n)
        throw ValidationError("auc: both classes must be present");
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return scores(a) < scores(b); });
    // Average ranks over ties, then the Mann-Whitney statistic.
    double rank_sum = 0.0;
    for (Index i = 0; i < n;) {
        Index j = i;
        while (j + 1 < n && scores(order[static_cast<std::size_t>(j + 1)]) == scores(order[static_cast<std::size_t>(i)]))
            ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (Index k = i; k <= j; ++k)
            if (labels(order[static_cast<std::size_t>(k)], 0) == 1.0)
                rank_sum += rank;
        i = j + 1;
    }
    const double np = static_cast<double>(pos);
    const double nn = static_cast<double>(n - pos);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

Metrics evaluate(const Prediction& pred, const Dataset& targets, const TargetScaling& scaling, bool with_auc)
{
    if (pred.samples.empty() || pred.mean.rows() != targets.size())
        throw ShapeError(detail::concat("evaluate: ", pred.mean.rows(), " predictions for ", targets.size(),
                                        " targets"));
    Metrics m;
    const auto s = static_cast<Index>(pred.samples.size());
    Matrix logp(s, targets.size());
    if (targets.task == gp::Task::regression) {
        if (with_auc)
            throw ValidationError("auc is defined for binary classification only");
        m.rmse = rmse(scaling.invert(pred.mean), scaling.invert(targets.y));
        for (Index k = 0; k < s; ++k)
            logp.row(k) = elbo::log_likelihood_rows(LikelihoodKind::gaussian, pred.samples[static_cast<std::size_t>(k)],
                                                    targets.y, pred.noise_variance)
                              .transpose();
        // Density of the original-scale target: divide by the scaling factor.
        m.nll = log_mean_exp_nll(logp) + std::log(scaling.std);
        return m;
    }
    for (Index k = 0; k < s; ++k)
        logp.row(k) = elbo::log_likelihood_rows(LikelihoodKind::softmax, pred.samples[static_cast<std::size_t>(k)],
                                                targets.y, 1.0)
                          .transpose();
    m.nll = log_mean_exp_nll(logp);
    m.accuracy = accuracy(pred.probabilities, targets.y);
    if (with_auc) {
        if (pred.probabilities.cols() != 2)
            throw ValidationError(detail::concat("auc requested for ", pred.probabilities.cols(),
                                                 " classes; it is defined for binary tasks only"));
        m.auc = auc(pred.probabilities.col(1), targets.y);
    }
    return m;
}

} // namespace ddvi::pipeline
