#ifndef DDVI_PIPELINE_PREDICT_HPP
#define DDVI_PIPELINE_PREDICT_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/model.hpp"
#include "ddvi/pipeline/dataset.hpp"

namespace ddvi::pipeline
{

/// Predictive samples of the final layer on the model's (normalized) scale.
struct Prediction
{
    std::vector<Matrix> samples; ///< n_samples entries, each B x D_L
    Matrix mean;                 ///< B x D_L, sample mean of F_L
    Matrix variance;             ///< regression: B x 1, sample variance of F_L plus noise variance
    Matrix probabilities;        ///< classification: B x C, averaged softmax
    double noise_variance = 0.0; ///< regression only
};

/// n posterior draws of the flattened inducing vector, one per column (H x n):
/// reverse-diffusion terminal states (DDVI) or draws from q (mean-field).
Matrix posterior_draws(const DgpModel& model, Index n, std::uint64_t seed);

/// For each draw: propagate X (with fresh layer noise) and collect F_L.
Prediction predict(const DgpModel& model, const Matrix& x, Index n_samples, std::uint64_t seed);

struct Metrics
{
    std::optional<double> rmse;
    std::optional<double> nll;
    std::optional<double> accuracy;
    std::optional<double> auc;
};

/// Root mean squared error between predictive means and targets (both N x 1).
double rmse(const Matrix& mean, const Matrix& y);

/// -mean_i log((1/S) sum_s exp(logp(s, i))) for an S x N matrix of per-sample
/// log densities.
double log_mean_exp_nll(const Matrix& logp);

double accuracy(const Matrix& probabilities, const Matrix& labels);

/// Area under the ROC curve by the rank statistic, ties counted as one half.
/// Labels must be 0/1 with both classes present.
double auc(const Vector& scores, const Matrix& labels);

/// Metrics for `targets` (normalized as the model sees them). Regression RMSE
/// and NLL are reported on the original target scale. `with_auc` requires a
/// binary task.
Metrics evaluate(const Prediction& pred, const Dataset& targets, const TargetScaling& scaling, bool with_auc);

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_PREDICT_HPP
