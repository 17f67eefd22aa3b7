#include "ddvi/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ddvi
{

std::string to_string(ParamGroup group)
{
    switch (group) {
    case ParamGroup::score: return "score";
    case ParamGroup::kernel: return "kernel";
    case ParamGroup::inducing: return "inducing";
    case ParamGroup::likelihood: return "likelihood";
    case ParamGroup::variational: return "variational";
    }
    return "unknown";
}

std::string to_string(Method method)
{
    return method == Method::ddvi ? "ddvi" : "dsvi";
}

std::string to_string(LikelihoodKind kind)
{
    switch (kind) {
    case LikelihoodKind::gaussian: return "gaussian";
    case LikelihoodKind::softmax: return "softmax";
    case LikelihoodKind::sign_mixture: return "sign_mixture";
    }
    return "unknown";
}

Method method_from_string(const std::string& name)
{
    if (name == "ddvi")
        return Method::ddvi;
    if (name == "dsvi")
        return Method::dsvi;
    throw ValidationError("unknown method '" + name + "' (expected ddvi or dsvi)");
}

LikelihoodKind likelihood_from_string(const std::string& name)
{
    if (name == "gaussian")
        return LikelihoodKind::gaussian;
    if (name == "softmax")
        return LikelihoodKind::softmax;
    if (name == "sign_mixture")
        return LikelihoodKind::sign_mixture;
    throw ValidationError("unknown likelihood '" + name + "'");
}

// ---------------------------------------------------------------------------

void ParameterStore::add(std::string name, ParamGroup group, Matrix value)
{
    if (contains(name))
        throw ValidationError("parameter '" + name + "' already present");
    params_.push_back({std::move(name), group, std::move(value)});
}

bool ParameterStore::contains(const std::string& name) const
{
    return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterStore::index(const std::string& name) const
{
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name)
            return i;
    throw ValidationError("no parameter named '" + name + "'");
}

const Matrix& ParameterStore::value(const std::string& name) const
{
    return params_[index(name)].value;
}

Matrix& ParameterStore::value(const std::string& name)
{
    return params_[index(name)].value;
}

Index ParameterStore::scalar_count() const
{
    return std::accumulate(params_.begin(), params_.end(), Index{0},
                           [](Index acc, const Parameter& p) { return acc + p.value.size(); });
}

// ---------------------------------------------------------------------------

void ModelSpec::validate() const
{
    arch.validate();
    schedule.validate();
    if (score_hidden < 1 || score_depth < 1)
        throw ValidationError("model: score network needs hidden >= 1 and depth >= 1");
    if (!(jitter > 0.0))
        throw ValidationError("model: jitter must be positive");
    const bool classification = arch.task == gp::Task::classification;
    if (classification != (likelihood == LikelihoodKind::softmax))
        throw ValidationError("model: softmax likelihood goes with classification, and only with it");
}

DgpModel::DgpModel(ModelSpec spec, ParameterStore params) : spec_(std::move(spec)), params_(std::move(params))
{
    spec_.validate();
}

std::string layer_param(Index layer, const std::string& field)
{
    return detail::concat("layer", layer + 1, ".", field);
}

DgpModel DgpModel::create(const ModelSpec& spec, const InitOptions& options)
{
    spec.validate();
    const gp::DgpArchitecture& arch = spec.arch;
    const Index m = arch.num_inducing;
    ParameterStore store;
    NormalStream rng(derive_seed(options.seed, 0x5EED));

    for (Index l = 0; l < arch.layers(); ++l) {
        const Index in = arch.in_dim(l);
        Matrix z = rng.matrix(m, in);
        if (l == 0 && options.inducing_from_data) {
            const Matrix& x = *options.inducing_from_data;
            if (x.cols() != in)
                throw ShapeError("init: inducing_from_data has the wrong feature count");
            std::vector<Index> rows(static_cast<std::size_t>(x.rows()));
            std::iota(rows.begin(), rows.end(), Index{0});
            std::shuffle(rows.begin(), rows.end(), rng.engine());
            for (Index i = 0; i < m; ++i)
                z.row(i) = x.row(rows[static_cast<std::size_t>(i % x.rows())]);
        }
        store.add(layer_param(l, "inducing"), ParamGroup::inducing, std::move(z));
        store.add(layer_param(l, "log_lengthscales"), ParamGroup::kernel,
                  Matrix::Constant(in, 1, std::log(options.lengthscale)));
        store.add(layer_param(l, "log_signal_variance"), ParamGroup::kernel,
                  Matrix::Constant(1, 1, std::log(options.signal_variance)));
    }
    if (spec.likelihood != LikelihoodKind::softmax)
        store.add("likelihood.log_noise_variance", ParamGroup::likelihood,
                  Matrix::Constant(1, 1, std::log(options.noise_variance)));

    if (spec.method == Method::ddvi) {
        const diffusion::ScoreNetworkShape shape{arch.flat_dim(), spec.score_hidden, spec.score_depth};
        for (auto& [name, value] : diffusion::init_score_network(shape, derive_seed(options.seed, 0x5C02E),
                                                                 options.zero_score_output))
            store.add(name, ParamGroup::score, std::move(value));
    } else {
        // q(U) starts at the prior: m = 0, S = K_ZZ.
        for (Index l = 0; l < arch.layers(); ++l) {
            store.add(detail::concat("dsvi.", layer_param(l, "mean")), ParamGroup::variational,
                      Matrix::Zero(m, arch.out_dim(l)));
            const Matrix& z = store.value(layer_param(l, "inducing"));
            kernels::KernelHyper hyper{store.value(layer_param(l, "log_lengthscales")).col(0),
                                       store.value(layer_param(l, "log_signal_variance"))(0, 0)};
            const Matrix factor = kernels::chol_with_jitter(kernels::rbf_gram(z, z, hyper), spec.jitter).lower;
            for (Index d = 0; d < arch.out_dim(l); ++d)
                store.add(detail::concat("dsvi.", layer_param(l, "chol"), d), ParamGroup::variational, factor);
        }
    }
    return DgpModel(spec, std::move(store));
}

BoundModel bind_vars(const DgpModel& model, std::span<const ad::Var> vars)
{
    const ParameterStore& store = model.params();
    if (vars.size() != store.size())
        throw ValidationError(detail::concat("bind_vars: ", vars.size(), " vars for ", store.size(), " parameters"));
    for (std::size_t i = 0; i < vars.size(); ++i)
        if (vars[i].rows() != store.all()[i].value.rows() || vars[i].cols() != store.all()[i].value.cols())
            throw ShapeError(detail::concat("bind_vars: '", store.all()[i].name, "' expects ",
                                            shape_str(store.all()[i].value), ", got ", shape_str(vars[i].value())));
    BoundModel bound;
    bound.vars.assign(vars.begin(), vars.end());
    const auto var = [&](const std::string& name) { return bound.vars[store.index(name)]; };
    const gp::DgpArchitecture& arch = model.spec().arch;
    for (Index l = 0; l < arch.layers(); ++l) {
        bound.layers.push_back(
            {var(layer_param(l, "inducing")),
             {var(layer_param(l, "log_lengthscales")), var(layer_param(l, "log_signal_variance"))}});
    }
    if (store.contains("likelihood.log_noise_variance"))
        bound.log_noise_variance = var("likelihood.log_noise_variance");

    if (model.spec().method == Method::ddvi) {
        bound.score.time_weight = var("score.time_weight");
        for (Index i = 0; i <= model.spec().score_depth; ++i)
            bound.score.layers.push_back(
                {var(detail::concat("score.l", i, ".weight")), var(detail::concat("score.l", i, ".bias"))});
    } else {
        for (Index l = 0; l < arch.layers(); ++l) {
            bound.dsvi_means.push_back(var(detail::concat("dsvi.", layer_param(l, "mean"))));
            std::vector<ad::Var> factors;
            for (Index d = 0; d < arch.out_dim(l); ++d)
                factors.push_back(var(detail::concat("dsvi.", layer_param(l, "chol"), d)));
            bound.dsvi_factors.push_back(std::move(factors));
        }
    }
    return bound;
}

namespace
{

template <typename Trainable>
BoundModel bind_with(ad::Tape& tape, const DgpModel& model, Trainable trainable)
{
    std::vector<ad::Var> vars;
    for (const Parameter& p : model.params().all())
        vars.push_back(trainable(p.group) ? tape.variable(p.value) : tape.constant(p.value));
    return bind_vars(model, vars);
}

} // namespace

BoundModel bind(ad::Tape& tape, const DgpModel& model, const std::set<ParamGroup>& trainable)
{
    return bind_with(tape, model,
                     [&](ParamGroup g) { return trainable.empty() || trainable.count(g) > 0; });
}

BoundModel bind_constants(ad::Tape& tape, const DgpModel& model)
{
    return bind_with(tape, model, [](ParamGroup) { return false; });
}

} // namespace ddvi
