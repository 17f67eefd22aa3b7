#ifndef DDVI_DIFFUSION_HPP
#define DDVI_DIFFUSION_HPP

// Reverse-time denoising diffusion over the flattened inducing vector.
//
// Forward (noising) dynamics dU = -lambda U dt + g dB with constant lambda, g.
// The bridge process runs the same dynamics from p_fix = N(0, sigma2 I) and has
// marginal N(0, kappa_t I). The learned reverse process starts at p_fix and
// steps with drift lambda U + g^2 s_phi(T - t, U).

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/diffcore.hpp"
#include "ddvi/random.hpp"

namespace ddvi::diffusion
{

struct DiffusionSchedule
{
    double lambda = 0.5;
    double g = 1.0;
    double T = 1.0;
    Index steps = 30;
    double sigma2_fix = 1.0;

    double dt() const { return T / static_cast<double>(steps); }
    double time(Index s) const { return static_cast<double>(s) * dt(); }
    /// Throws ValidationError unless lambda >= 0, g >= 0, T > 0, steps >= 1, sigma2_fix > 0.
    void validate() const;
    /// sigma2_fix = g^2 / (2 lambda): kappa_t is constant and the boundary KL vanishes.
    bool stationary(double tol = 1e-12) const;

    bool operator==(const DiffusionSchedule&) const = default;
};

/// Bridge marginal variance, the solution of dk/dt = -2 lambda k + g^2, k_0 = sigma2.
template <typename Scalar>
Scalar kappa(Scalar t, const DiffusionSchedule& schedule)
{
    if (!(t >= Scalar(0)) || t > Scalar(schedule.T) * Scalar(1 + 1e-12))
        throw ValidationError(detail::concat("kappa: t = ", t, " outside [0, ", schedule.T, "]"));
    const Scalar s2 = Scalar(schedule.sigma2_fix);
    const Scalar g2 = Scalar(schedule.g) * Scalar(schedule.g);
    const Scalar lam = Scalar(schedule.lambda);
    if (lam == Scalar(0))
        return s2 + g2 * t;
    const Scalar decay = std::exp(Scalar(-2) * lam * t);
    // 1 - exp(-2 lambda t) without cancellation for small lambda t.
    const Scalar growth = -std::expm1(Scalar(-2) * lam * t);
    return s2 * decay + g2 / (Scalar(2) * lam) * growth;
}

/// Fixed-step RK4 integration of the variance ODE. Independent check of kappa().
double kappa_ode_oracle(double t, const DiffusionSchedule& schedule, Index steps = 10000);

/// KL(N(0, sigma2 I_H) || N(0, kappa_T I_H)).
double boundary_kl(const DiffusionSchedule& schedule, Index dim);

// ---------------------------------------------------------------------------
// Score network

inline constexpr Index time_frequencies = 4;
inline constexpr Index time_embedding_width = 1 + 2 * time_frequencies;

/// [t/T, sin(pi 2^k t/T), cos(pi 2^k t/T) for k < 4], replicated over `cols`.
Matrix time_embedding(double t, double horizon, Index cols);

using NamedMatrix = std::pair<std::string, Matrix>;

struct ScoreNetworkShape
{
    Index state_dim = 1;
    Index hidden = 128;
    Index depth = 2; ///< number of tanh hidden layers
};

/// Initial parameters, named "score.time_weight", "score.l<i>.weight",
/// "score.l<i>.bias". Hidden weights are Glorot-normal, biases zero. The
/// output layer is zero (so s_phi = 0) unless `zero_output` is false.
std::vector<NamedMatrix> init_score_network(const ScoreNetworkShape& shape, std::uint64_t seed,
                                            bool zero_output = true);

struct DenseLayerVars
{
    ad::Var weight;
    ad::Var bias;
};

/// Tape-bound parameters of the fully connected score network. layers[0].weight
/// acts on the state; time_weight on the time embedding.
struct ScoreNetworkVars
{
    ad::Var time_weight;
    std::vector<DenseLayerVars> layers;
};

enum class ScoreMode
{
    network,
    analytic, ///< exact bridge score -U / kappa_t; used to verify the path estimator
};

class ScoreModel
{
public:
    static ScoreModel network(ScoreNetworkVars vars, const DiffusionSchedule& schedule);
    static ScoreModel analytic(const DiffusionSchedule& schedule);

    /// s(t, U) for a state batch U (H x K); columns are independent states.
    ad::Var operator()(double t, const ad::Var& u) const;

    ScoreMode mode() const { return mode_; }
    const DiffusionSchedule& schedule() const { return schedule_; }

private:
    ScoreModel(ScoreMode mode, ScoreNetworkVars vars, const DiffusionSchedule& schedule)
        : mode_(mode), vars_(std::move(vars)), schedule_(schedule) {}

    ScoreMode mode_;
    ScoreNetworkVars vars_;
    DiffusionSchedule schedule_;
};

// ---------------------------------------------------------------------------
// Reverse simulation and path KL

struct ReverseTrajectory
{
    std::vector<ad::Var> states; ///< U_0 .. U_S, each H x K
    std::vector<ad::Var> scores; ///< s_phi(T - t_s, U_s) for s < S
    std::vector<Matrix> noise;   ///< eps_0 .. eps_{S-1}
    DiffusionSchedule schedule;

    const ad::Var& terminal() const { return states.back(); }
};

/// Euler-Maruyama simulation of K independent reverse trajectories:
///   U_0 = sigma eps, U_{s+1} = U_s + dt (lambda U_s + g^2 s(T - t_s, U_s)) + g sqrt(dt) eps_s.
/// Column k draws all of its noise from streams[k] in step order, so a column
/// does not depend on how many others are simulated alongside it. Throws
/// NumericalError naming the step if the state turns non-finite.
ReverseTrajectory simulate_reverse(ad::Tape& tape, const ScoreModel& score, Index state_dim,
                                   std::vector<NormalStream>& streams);

/// Convenience overload: K trajectories with streams derive_seed(seed, k).
ReverseTrajectory simulate_reverse(ad::Tape& tape, const ScoreModel& score, Index state_dim, Index count,
                                   std::uint64_t seed);

/// Per-trajectory estimate of KL(Q^phi || Q^bridge) (1 x K):
/// boundary_kl + 0.5 sum_s dt g^2 || U_s / kappa_{T - t_s} + s_s ||^2.
ad::Var path_kl(const ReverseTrajectory& trajectory, const DiffusionSchedule& schedule);

} // namespace ddvi::diffusion

#endif // DDVI_DIFFUSION_HPP
