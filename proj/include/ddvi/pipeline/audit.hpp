#ifndef DDVI_PIPELINE_AUDIT_HPP
#define DDVI_PIPELINE_AUDIT_HPP

// Self-checks shared by the command-line tool and the acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/model.hpp"

namespace ddvi::pipeline
{

struct OracleCheck
{
    std::string name;
    double max_deviation = 0.0;
    double tolerance = 0.0;

    bool passed() const { return max_deviation < tolerance; }
};

/// Closed-form bridge variance against the numeric ODE integration: relative
/// error at 20 grid points for 5 random schedules drawn from `seed`.
OracleCheck kappa_oracle_check(std::uint64_t seed);

/// Single-layer conjugate identities on a random instance with Z = X:
/// the exact inducing posterior equals the GP posterior at X, and the
/// mean-field bound at its optimum equals the log marginal likelihood.
std::vector<OracleCheck> conjugate_oracle_checks(std::uint64_t seed);

struct GroupGradError
{
    ParamGroup group;
    double max_rel_error = 0.0;
    std::string worst_param;
    Index coordinates = 0;
};

/// Autodiff against central differences on a frozen-seed bound, one entry per
/// parameter group present in the model.
std::vector<GroupGradError> grad_audit(const DgpModel& model, const Matrix& x, const Matrix& y, Index n_total,
                                       Index n_mc, std::uint64_t seed, double eps = 1e-5);

/// The standard audit instance: two layers, M = 4, B = 8, S = 10, H = 16.
DgpModel grad_audit_model(std::uint64_t seed, Matrix& x, Matrix& y);

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_AUDIT_HPP
