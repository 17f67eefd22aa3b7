#ifndef DDVI_MODEL_HPP
#define DDVI_MODEL_HPP

// Trainable DGP state: named parameter arrays plus the static model spec, and
// their binding onto an autodiff tape.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/diffcore.hpp"
#include "ddvi/diffusion.hpp"
#include "ddvi/gplayers.hpp"

namespace ddvi
{

enum class ParamGroup
{
    score,       ///< phi
    kernel,      ///< log lengthscales and signal variances
    inducing,    ///< Z
    likelihood,  ///< noise variance
    variational, ///< mean-field m and Cholesky factors (baseline only)
};

enum class Method
{
    ddvi,
    dsvi,
};

enum class LikelihoodKind
{
    gaussian,
    softmax,
    /// 0.5 N(y | f, s2) + 0.5 N(y | -f, s2): sign-ambiguous observations.
    sign_mixture,
};

std::string to_string(ParamGroup group);
std::string to_string(Method method);
std::string to_string(LikelihoodKind kind);
Method method_from_string(const std::string& name);
LikelihoodKind likelihood_from_string(const std::string& name);

struct Parameter
{
    std::string name;
    ParamGroup group;
    Matrix value;
};

/// Ordered collection of named parameter arrays.
class ParameterStore
{
public:
    void add(std::string name, ParamGroup group, Matrix value);
    bool contains(const std::string& name) const;
    const Matrix& value(const std::string& name) const;
    Matrix& value(const std::string& name);
    std::size_t index(const std::string& name) const;

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }
    Index scalar_count() const;

private:
    std::vector<Parameter> params_;
};

struct ModelSpec
{
    gp::DgpArchitecture arch;
    diffusion::DiffusionSchedule schedule;
    LikelihoodKind likelihood = LikelihoodKind::gaussian;
    Method method = Method::ddvi;
    Index score_hidden = 128;
    Index score_depth = 2;
    double jitter = kernels::default_base_jitter;

    void validate() const;
};

struct InitOptions
{
    std::uint64_t seed = 0;
    double noise_variance = 0.1;
    double lengthscale = 1.0;
    double signal_variance = 1.0;
    /// Draw Z from the training inputs instead of N(0, 1) entries.
    std::optional<Matrix> inducing_from_data;
    bool zero_score_output = true;
};

class DgpModel
{
public:
    DgpModel() = default;
    DgpModel(ModelSpec spec, ParameterStore params);

    /// Fresh parameters: Z with standard-normal entries (or a data subset for
    /// layer 1), unit-scale kernels, zero-output score network (DDVI) or a
    /// prior-matching mean-field q (DSVI).
    static DgpModel create(const ModelSpec& spec, const InitOptions& options);

    const ModelSpec& spec() const { return spec_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

private:
    ModelSpec spec_;
    ParameterStore params_;
};

std::string layer_param(Index layer, const std::string& field);

/// Model parameters bound to a tape. `vars` is index-aligned with the store.
struct BoundModel
{
    std::vector<gp::LayerVars> layers;
    diffusion::ScoreNetworkVars score;
    ad::Var log_noise_variance;
    std::vector<ad::Var> dsvi_means;                ///< per layer, M x D_l
    std::vector<std::vector<ad::Var>> dsvi_factors; ///< per layer, per output dim, M x M
    std::vector<ad::Var> vars;
};

/// Binds every parameter; groups in `trainable` become variables, the rest
/// constants. An empty set means all groups are trainable.
BoundModel bind(ad::Tape& tape, const DgpModel& model, const std::set<ParamGroup>& trainable = {});

/// Structured view over caller-owned leaves, index-aligned with model.params().
BoundModel bind_vars(const DgpModel& model, std::span<const ad::Var> vars);

/// Binds every parameter as a constant, for plain evaluation.
BoundModel bind_constants(ad::Tape& tape, const DgpModel& model);

} // namespace ddvi

#endif // DDVI_MODEL_HPP
