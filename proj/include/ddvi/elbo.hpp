#ifndef DDVI_ELBO_HPP
#define DDVI_ELBO_HPP

#include <cstdint>

#include "ddvi/common.hpp"
#include "ddvi/diffcore.hpp"
#include "ddvi/kernels.hpp"
#include "ddvi/model.hpp"

namespace ddvi::elbo
{

/// Averaged bound terms: total = prior + likelihood - l1 - fix.
struct ElboBreakdown
{
    double prior_term = 0.0;
    double likelihood_term = 0.0;
    double l1_term = 0.0;
    double fix_term = 0.0;
    double total = 0.0;
    Index n_mc = 0;

    double recomputed_total() const { return prior_term + likelihood_term - l1_term - fix_term; }
};

/// The same terms as differentiable nodes.
struct ElboTerms
{
    ad::Var prior;
    ad::Var likelihood;
    ad::Var l1;
    ad::Var fix;
    ad::Var total;
    Index n_mc = 0;

    ElboBreakdown values() const;
};

/// Sum over rows of log p(y_i | f_i) for the model's likelihood. Targets are
/// B x 1; class labels are stored as integral doubles.
ad::Var log_likelihood(LikelihoodKind kind, const ad::Var& f, const Matrix& y, const ad::Var& log_noise_variance);

/// Per-entry log density of targets under each predictive sample, for
/// plain-value metrics. `f` is B x D_L for one sample; returns B x 1.
Vector log_likelihood_rows(LikelihoodKind kind, const Matrix& f, const Matrix& y, double noise_variance);

/// One evaluation of the DDVI lower bound on a minibatch:
/// n_mc reverse trajectories give U_T; each contributes log p(U_T),
/// (N/B) sum_i log p(y_i | f_{L,i}) from one propagated sample, the path KL and
/// log p_fix(U_T). Sample k uses the noise stream derive_seed(seed, k).
ElboTerms ddvi_elbo(const BoundModel& model, const ModelSpec& spec, const Matrix& x, const Matrix& y,
                    Index n_total, Index n_mc, std::uint64_t seed);

/// Mean-field baseline bound: (N/B) E_q log p(y | f_L) - sum_{l,d} KL(q(U_ld) || p(U_ld)).
/// The breakdown reports -KL as prior_term; l1 and fix are zero.
ElboTerms dsvi_elbo(const BoundModel& model, const ModelSpec& spec, const Matrix& x, const Matrix& y,
                    Index n_total, Index n_mc, std::uint64_t seed);

/// Dispatches on spec.method.
ElboTerms evaluate_bound(const BoundModel& model, const ModelSpec& spec, const Matrix& x, const Matrix& y,
                         Index n_total, Index n_mc, std::uint64_t seed);

/// Plain evaluation with all parameters held constant.
ElboBreakdown evaluate_bound(const DgpModel& model, const Matrix& x, const Matrix& y, Index n_total, Index n_mc,
                             std::uint64_t seed);

/// KL(N(m, L_S L_S^T) || N(0, L_K L_K^T)) summed over the columns of `mean`,
/// all columns sharing L_K. Only the lower triangle of each L_S is read.
ad::Var gaussian_kl(const ad::Var& mean, const std::vector<ad::Var>& q_factors, const ad::Var& prior_lower);

// ---------------------------------------------------------------------------
// Conjugate single-layer oracles (plain values)

struct ExactGaussianPosterior
{
    Vector mean;
    Matrix covariance;
    double log_marginal = 0.0;
};

/// Exact p(u | y) for y = f + noise with f | u from the full GP conditional:
/// A = K_XZ K_ZZ^{-1}, C = K_XX - A K_ZX + noise I,
/// cov = (K_ZZ^{-1} + A^T C^{-1} A)^{-1}, mean = cov A^T C^{-1} y, and
/// log_marginal = log N(y | 0, K_XX + noise I). K_ZZ carries `jitter`.
ExactGaussianPosterior exact_gaussian_posterior(const Matrix& x, const Vector& y, const Matrix& z,
                                                const kernels::KernelHyper& hyper, double noise_variance,
                                                double jitter = kernels::default_base_jitter);

struct GaussianQ
{
    Vector mean;
    Matrix covariance;
};

/// Maximizer of the mean-field bound for a single Gaussian-likelihood layer:
/// Sigma = K_ZZ + K_ZX K_XZ / noise, q = N(K_ZZ Sigma^{-1} K_ZX y / noise, K_ZZ Sigma^{-1} K_ZZ).
GaussianQ optimal_conjugate_q(const Matrix& x, const Vector& y, const Matrix& z, const kernels::KernelHyper& hyper,
                              double noise_variance, double jitter = kernels::default_base_jitter);

/// Expected value of the mean-field bound at `q` (single layer, Gaussian
/// likelihood, marginal sampling of f): closed form, no Monte Carlo.
double expected_dsvi_bound(const Matrix& x, const Vector& y, const Matrix& z, const kernels::KernelHyper& hyper,
                           double noise_variance, const GaussianQ& q, double jitter = kernels::default_base_jitter);

} // namespace ddvi::elbo

#endif // DDVI_ELBO_HPP
