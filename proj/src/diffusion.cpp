#include "ddvi/diffusion.hpp"

#include <numbers>

namespace ddvi::diffusion
{

void DiffusionSchedule::validate() const
{
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
        throw ValidationError(detail::concat("schedule: lambda must be >= 0, got ", lambda));
    if (!(g >= 0.0) || !std::isfinite(g))
        throw ValidationError(detail::concat("schedule: g must be >= 0, got ", g));
    if (!(T > 0.0) || !std::isfinite(T))
        throw ValidationError(detail::concat("schedule: T must be > 0, got ", T));
    if (steps < 1)
        throw ValidationError(detail::concat("schedule: steps must be >= 1, got ", steps));
    if (!(sigma2_fix > 0.0) || !std::isfinite(sigma2_fix))
        throw ValidationError(detail::concat("schedule: sigma2_fix must be > 0, got ", sigma2_fix));
}

bool DiffusionSchedule::stationary(double tol) const
{
    return lambda > 0.0 && std::abs(sigma2_fix - g * g / (2.0 * lambda)) <= tol * sigma2_fix;
}

double kappa_ode_oracle(double t, const DiffusionSchedule& schedule, Index steps)
{
    const double g2 = schedule.g * schedule.g;
    const auto rhs = [&](double k) { return -2.0 * schedule.lambda * k + g2; };
    const double h = t / static_cast<double>(steps);
    double k = schedule.sigma2_fix;
    for (Index i = 0; i < steps; ++i) {
        const double k1 = rhs(k);
        const double k2 = rhs(k + 0.5 * h * k1);
        const double k3 = rhs(k + 0.5 * h * k2);
        const double k4 = rhs(k + h * k3);
        k += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return k;
}

double boundary_kl(const DiffusionSchedule& schedule, Index dim)
{
    const double ratio = schedule.sigma2_fix / kappa(schedule.T, schedule);
    return 0.5 * static_cast<double>(dim) * (ratio - 1.0 - std::log(ratio));
}

Matrix time_embedding(double t, double horizon, Index cols)
{
    Vector e(time_embedding_width);
    const double s = t / horizon;
    e(0) = s;
    for (Index k = 0; k < time_frequencies; ++k) {
        const double w = std::numbers::pi * static_cast<double>(Index{1} << k);
        e(1 + 2 * k) = std::sin(w * s);
        e(2 + 2 * k) = std::cos(w * s);
    }
    return e.replicate(1, cols);
}

std::vector<NamedMatrix> init_score_network(const ScoreNetworkShape& shape, std::uint64_t seed, bool zero_output)
{
    if (shape.state_dim < 1 || shape.hidden < 1 || shape.depth < 1)
        throw ValidationError("score network: state_dim, hidden and depth must be >= 1");
    NormalStream rng(seed);
    const auto glorot = [&rng](Index out, Index in) {
        return Matrix(rng.matrix(out, in) * std::sqrt(2.0 / static_cast<double>(in + out)));
    };
    std::vector<NamedMatrix> params;
    const Index in0 = shape.state_dim + time_embedding_width;
    // The first layer's fan-in counts state and time inputs together.
    const Matrix first = glorot(shape.hidden, in0);
    params.emplace_back("score.time_weight", first.rightCols(time_embedding_width));
    params.emplace_back("score.l0.weight", first.leftCols(shape.state_dim));
    params.emplace_back("score.l0.bias", Matrix::Zero(shape.hidden, 1));
    for (Index i = 1; i < shape.depth; ++i) {
        params.emplace_back(detail::concat("score.l", i, ".weight"), glorot(shape.hidden, shape.hidden));
        params.emplace_back(detail::concat("score.l", i, ".bias"), Matrix::Zero(shape.hidden, 1));
    }
    params.emplace_back(detail::concat("score.l", shape.depth, ".weight"),
                        zero_output ? Matrix::Zero(shape.state_dim, shape.hidden)
                                    : glorot(shape.state_dim, shape.hidden));
    params.emplace_back(detail::concat("score.l", shape.depth, ".bias"), Matrix::Zero(shape.state_dim, 1));
    return params;
}

ScoreModel ScoreModel::network(ScoreNetworkVars vars, const DiffusionSchedule& schedule)
{
    if (vars.layers.size() < 2)
        throw ValidationError("score network: need at least one hidden and one output layer");
    return {ScoreMode::network, std::move(vars), schedule};
}

ScoreModel ScoreModel::analytic(const DiffusionSchedule& schedule)
{
    return {ScoreMode::analytic, {}, schedule};
}

ad::Var ScoreModel::operator()(double t, const ad::Var& u) const
{
    if (mode_ == ScoreMode::analytic)
        return ad::scale(u, -(1.0 / kappa(t, schedule_)));

    (void)kappa(t, schedule_); // range check
    ad::Tape& tape = u.tape();
    const Index cols = u.cols();
    const DenseLayerVars& first = vars_.layers.front();
    if (first.weight.cols() != u.rows())
        throw ShapeError(detail::concat("score network: state ", shape_str(u.value()), " vs input weight ",
                                        shape_str(first.weight.value())));
    const ad::Var emb = tape.constant(time_embedding(t, schedule_.T, 1));
    // The time contribution is shared by every column.
    const ad::Var time_term = ad::matmul(vars_.time_weight, emb) + first.bias;
    ad::Var h = ad::tanh(ad::matmul(first.weight, u) + ad::broadcast(time_term, first.weight.rows(), cols));
    for (std::size_t i = 1; i + 1 < vars_.layers.size(); ++i) {
        const DenseLayerVars& layer = vars_.layers[i];
        h = ad::tanh(ad::matmul(layer.weight, h) + ad::broadcast(layer.bias, layer.weight.rows(), cols));
    }
    const DenseLayerVars& last = vars_.layers.back();
    return ad::matmul(last.weight, h) + ad::broadcast(last.bias, last.weight.rows(), cols);
}

ReverseTrajectory simulate_reverse(ad::Tape& tape, const ScoreModel& score, Index state_dim,
                                   std::vector<NormalStream>& streams)
{
    const DiffusionSchedule& schedule = score.schedule();
    schedule.validate();
    const Index count = static_cast<Index>(streams.size());
    if (count < 1 || state_dim < 1)
        throw ValidationError("simulate_reverse: need at least one trajectory of positive dimension");

    const auto draw = [&]() {
        Matrix eps(state_dim, count);
        for (Index k = 0; k < count; ++k)
            for (Index i = 0; i < state_dim; ++i)
                eps(i, k) = streams[static_cast<std::size_t>(k)].next();
        return eps;
    };

    ReverseTrajectory traj;
    traj.schedule = schedule;
    const double dt = schedule.dt();
    const double g2 = schedule.g * schedule.g;
    const double noise_scale = schedule.g * std::sqrt(dt);

    traj.states.push_back(tape.constant(std::sqrt(schedule.sigma2_fix) * draw()));
    for (Index s = 0; s < schedule.steps; ++s) {
        const ad::Var& u = traj.states.back();
        const double tau = std::max(0.0, schedule.T - schedule.time(s));
        const ad::Var sc = score(tau, u);
        traj.noise.push_back(draw());
        const ad::Var next = (1.0 + dt * schedule.lambda) * u + (dt * g2) * sc +
                             tape.constant(noise_scale * traj.noise.back());
        if (!next.value().allFinite())
            throw NumericalError(detail::concat("simulate_reverse: non-finite state at step ", s + 1, " of ",
                                                schedule.steps));
        traj.scores.push_back(sc);
        traj.states.push_back(next);
    }
    return traj;
}

ReverseTrajectory simulate_reverse(ad::Tape& tape, const ScoreModel& score, Index state_dim, Index count,
                                   std::uint64_t seed)
{
    std::vector<NormalStream> streams;
    streams.reserve(static_cast<std::size_t>(count));
    for (Index k = 0; k < count; ++k)
        streams.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(k)));
    return simulate_reverse(tape, score, state_dim, streams);
}

ad::Var path_kl(const ReverseTrajectory& trajectory, const DiffusionSchedule& schedule)
{
    if (!(trajectory.schedule == schedule))
        throw ValidationError("path_kl: trajectory was simulated with a different schedule");
    if (trajectory.states.size() != static_cast<std::size_t>(schedule.steps) + 1)
        throw ValidationError("path_kl: trajectory length does not match the schedule");
    const Index dim = trajectory.states.front().rows();
    const Index count = trajectory.states.front().cols();
    const double dt = schedule.dt();
    const double weight = 0.5 * dt * schedule.g * schedule.g;

    ad::Tape& tape = trajectory.states.front().tape();
    ad::Var total = tape.constant(Matrix::Constant(1, count, boundary_kl(schedule, dim)));
    for (Index s = 0; s < schedule.steps; ++s) {
        const auto idx = static_cast<std::size_t>(s);
        const double tau = std::max(0.0, schedule.T - schedule.time(s));
        const double inv_kappa = 1.0 / kappa(tau, schedule);
        const ad::Var mismatch = ad::scale(trajectory.states[idx], inv_kappa) + trajectory.scores[idx];
        total = total + weight * ad::sum_cols(ad::square(mismatch));
    }
    return total;
}

} // namespace ddvi::diffusion
