#include "ddvi/pipeline/audit.hpp"

#include <algorithm>
#include <cmath>

#include "ddvi/diffusion.hpp"
#include "ddvi/elbo.hpp"
#include "ddvi/kernels.hpp"
#include "ddvi/random.hpp"

namespace ddvi::pipeline
{

OracleCheck kappa_oracle_check(std::uint64_t seed)
{
    NormalStream rng(derive_seed(seed, 0x4A77A));
    OracleCheck check{"kappa_ode", 0.0, 1e-6};
    for (int k = 0; k < 5; ++k) {
        diffusion::DiffusionSchedule s;
        s.lambda = 2.0 * rng.uniform();
        s.g = 0.1 + 2.0 * rng.uniform();
        s.T = 0.5 + 2.0 * rng.uniform();
        s.sigma2_fix = 0.1 + 2.0 * rng.uniform();
        for (int i = 0; i < 20; ++i) {
            const double t = s.T * static_cast<double>(i) / 19.0;
            const double closed = diffusion::kappa(t, s);
            const double ode = diffusion::kappa_ode_oracle(t, s);
            check.max_deviation = std::max(check.max_deviation, std::abs(closed - ode) / std::abs(ode));
        }
    }
    return check;
}

std::vector<OracleCheck> conjugate_oracle_checks(std::uint64_t seed)
{
    NormalStream rng(derive_seed(seed, 0xC0417));
    const Index n = 12;
    Matrix x(n, 2);
    for (Index i = 0; i < n; ++i) {
        x(i, 0) = -3.0 + 6.0 * static_cast<double>(i) / static_cast<double>(n - 1);
        x(i, 1) = rng.next();
    }
    const Vector y = rng.matrix(n, 1);
    const kernels::KernelHyper h{(Vector(2) << std::log(0.8), std::log(1.5)).finished(), std::log(1.3)};
    const double noise = 0.2;
    const double jitter = 1e-10;

    Matrix k = kernels::rbf_gram(x, x, h);
    Matrix c = k;
    c.diagonal().array() += noise;
    const Eigen::LLT<Matrix> llt(c);
    const Vector gp_mean = k * llt.solve(y);
    const Matrix gp_cov = k - k * llt.solve(k);

    const auto post = elbo::exact_gaussian_posterior(x, y, x, h, noise, jitter);
    OracleCheck mean{"posterior_mean", (post.mean - gp_mean).cwiseAbs().maxCoeff(), 1e-6};
    OracleCheck cov{"posterior_covariance", (post.covariance - gp_cov).cwiseAbs().maxCoeff(), 1e-6};

    const auto q = elbo::optimal_conjugate_q(x, y, x, h, noise, jitter);
    const double bound = elbo::expected_dsvi_bound(x, y, x, h, noise, q, jitter);
    OracleCheck tight{"optimal_bound", std::abs(bound - post.log_marginal), 1e-6};
    OracleCheck q_mean{"optimal_q_mean", (q.mean - post.mean).cwiseAbs().maxCoeff(), 1e-6};
    return {mean, cov, q_mean, tight};
}

std::vector<GroupGradError> grad_audit(const DgpModel& model, const Matrix& x, const Matrix& y, Index n_total,
                                       Index n_mc, std::uint64_t seed, double eps)
{
    const auto& all = model.params().all();
    std::vector<GroupGradError> out;
    for (const ParamGroup group : {ParamGroup::score, ParamGroup::kernel, ParamGroup::inducing,
                                   ParamGroup::likelihood, ParamGroup::variational}) {
        std::vector<std::size_t> members;
        std::vector<Matrix> values;
        for (std::size_t i = 0; i < all.size(); ++i)
            if (all[i].group == group) {
                members.push_back(i);
                values.push_back(all[i].value);
            }
        if (members.empty())
            continue;
        const ad::ScalarFunction f = [&](ad::Tape& tape, std::span<const ad::Var> p) {
            std::vector<ad::Var> vars;
            vars.reserve(all.size());
            std::size_t next = 0;
            for (std::size_t i = 0; i < all.size(); ++i) {
                if (next < members.size() && members[next] == i)
                    vars.push_back(p[next++]);
                else
                    vars.push_back(tape.constant(all[i].value));
            }
            const BoundModel bound = bind_vars(model, vars);
            return elbo::evaluate_bound(bound, model.spec(), x, y, n_total, n_mc, seed).total;
        };
        const ad::GradCheckResult r = ad::grad_check(f, values, {.eps = eps, .max_coords_per_param = {}, .subset_seed = 0});
        GroupGradError e{group, r.max_rel_error, all[members[r.worst_param]].name, 0};
        for (const Matrix& v : values)
            e.coordinates += v.size();
        out.push_back(e);
    }
    return out;
}

DgpModel grad_audit_model(std::uint64_t seed, Matrix& x, Matrix& y)
{
    NormalStream rng(derive_seed(seed, 0x6A0D1));
    x = rng.matrix(8, 3);
    y = rng.matrix(8, 1);
    ModelSpec spec;
    spec.arch = gp::DgpArchitecture::make(3, 2, 4, gp::Task::regression);
    spec.schedule.steps = 10;
    spec.score_hidden = 8;
    spec.method = Method::ddvi;
    InitOptions init;
    init.seed = seed;
    init.zero_score_output = false;
    return DgpModel::create(spec, init);
}

} // namespace ddvi::pipeline
