#include "ddvi/pipeline/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "ddvi/random.hpp"

namespace ddvi::pipeline
{

namespace
{

constexpr std::uint64_t batch_stream = 0xBA7C4;
constexpr std::uint64_t elbo_stream = 0xE1B0;

double bits_to_double(std::uint64_t v)
{
    return std::bit_cast<double>(v);
}

std::uint64_t double_to_bits(double v)
{
    return std::bit_cast<std::uint64_t>(v);
}

std::string metric_line(const MetricRow& row)
{
    std::ostringstream ss;
    ss.precision(17);
    ss << row.iter << ',' << row.bound.total << ',' << row.bound.prior_term << ',' << row.bound.likelihood_term << ','
       << row.bound.l1_term << ',' << row.bound.fix_term << ',';
    ss.precision(6);
    ss << std::fixed << row.wall_ms;
    return ss.str();
}

bool all_finite(const std::vector<Matrix>& grads)
{
    for (const Matrix& g : grads)
        if (g.size() > 0 && !g.allFinite())
            return false;
    return true;
}

} // namespace

ModelSpec model_spec(const TrainConfig& config, Index input_dim, Index num_classes)
{
    ModelSpec spec;
    spec.arch = gp::DgpArchitecture::make(input_dim, config.layers, config.num_inducing, config.task, num_classes,
                                          config.hidden_cap);
    spec.schedule = config.schedule();
    spec.likelihood = config.likelihood;
    spec.method = config.method;
    spec.score_hidden = config.score_hidden;
    spec.score_depth = config.score_depth;
    spec.jitter = config.jitter;
    spec.validate();
    return spec;
}

TrainState init_state(const TrainConfig& config, const Dataset& train, const Preprocessor& preprocessor)
{
    config.validate();
    TrainState state;
    state.config = config;
    state.preprocessor = preprocessor;
    InitOptions init;
    init.seed = config.seed;
    init.noise_variance = config.init_noise_variance;
    init.lengthscale = config.init_lengthscale;
    init.inducing_from_data = train.x;
    state.model = DgpModel::create(model_spec(config, train.dim(), train.num_classes), init);
    state.adam = AdamState::zeros(state.model.params(), config.lr);
    return state;
}

Checkpoint to_checkpoint(const TrainState& state)
{
    Checkpoint ckpt;
    ckpt.config = state.config.to_text();
    const ParameterStore& params = state.model.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params.all()[i];
        ckpt.put("param/" + p.name, p.value);
        ckpt.put("adam.m/" + p.name, state.adam.m[i]);
        ckpt.put("adam.v/" + p.name, state.adam.v[i]);
    }
    const gp::DgpArchitecture& arch = state.model.spec().arch;
    ckpt.put("state.iteration", Matrix::Constant(1, 1, static_cast<double>(state.iteration)));
    ckpt.put("state.adam_step", Matrix::Constant(1, 1, static_cast<double>(state.adam.step)));
    // Randomness is counter-based: the master seed and the iteration counter
    // determine every later draw.
    Matrix rng(1, 2);
    rng << bits_to_double(state.config.seed), bits_to_double(static_cast<std::uint64_t>(state.iteration));
    ckpt.put("state.rng", rng);
    ckpt.put("data.shape", (Matrix(1, 2) << static_cast<double>(arch.input_dim),
                            static_cast<double>(arch.num_classes)).finished());
    const Preprocessor& pre = state.preprocessor;
    ckpt.put("data.pca_mean", pre.pca.mean);
    ckpt.put("data.pca_components", pre.pca.components);
    ckpt.put("data.feature_min", pre.features.min);
    ckpt.put("data.feature_max", pre.features.max);
    ckpt.put("data.target_scaling", (Matrix(1, 2) << pre.targets.mean, pre.targets.std).finished());
    return ckpt;
}

TrainState from_checkpoint(const Checkpoint& ckpt)
{
    TrainState state;
    state.config = TrainConfig::from_text(ckpt.config);
    state.config.validate();
    const Matrix shape = ckpt.matrix("data.shape");
    const ModelSpec spec = model_spec(state.config, static_cast<Index>(shape(0, 0)), static_cast<Index>(shape(0, 1)));
    // Parameter order and shapes come from a fresh model; values from the file.
    DgpModel fresh = DgpModel::create(spec, {});
    state.adam = AdamState::zeros(fresh.params(), state.config.lr);
    for (std::size_t i = 0; i < fresh.params().size(); ++i) {
        Parameter& p = fresh.params().all()[i];
        const Matrix value = ckpt.matrix("param/" + p.name);
        if (value.rows() != p.value.rows() || value.cols() != p.value.cols())
            throw ValidationError(detail::concat("checkpoint parameter '", p.name, "' is ", shape_str(value),
                                                 ", model expects ", shape_str(p.value)));
        p.value = value;
        state.adam.m[i] = ckpt.matrix("adam.m/" + p.name);
        state.adam.v[i] = ckpt.matrix("adam.v/" + p.name);
    }
    state.model = std::move(fresh);
    state.iteration = static_cast<Index>(ckpt.matrix("state.iteration")(0, 0));
    state.adam.step = static_cast<std::uint64_t>(ckpt.matrix("state.adam_step")(0, 0));
    const Matrix rng = ckpt.matrix("state.rng");
    if (double_to_bits(rng(0, 0)) != state.config.seed ||
        double_to_bits(rng(0, 1)) != static_cast<std::uint64_t>(state.iteration))
        throw ValidationError("checkpoint RNG state disagrees with its config seed or iteration counter");
    Preprocessor& pre = state.preprocessor;
    pre.pca.mean = ckpt.matrix("data.pca_mean").col(0);
    pre.pca.components = ckpt.matrix("data.pca_components");
    if (pre.pca.components.size() == 0)
        pre.pca.mean.resize(0);
    pre.features.min = ckpt.matrix("data.feature_min").col(0);
    pre.features.max = ckpt.matrix("data.feature_max").col(0);
    const Matrix ts = ckpt.matrix("data.target_scaling");
    pre.targets = {ts(0, 0), ts(0, 1)};
    return state;
}

std::vector<Index> minibatch(Index n, Index batch_size, std::uint64_t seed, Index iter)
{
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        idx[static_cast<std::size_t>(i)] = i;
    if (batch_size >= n)
        return idx;
    std::mt19937_64 rng(derive_seed(derive_seed(seed, batch_stream), static_cast<std::uint64_t>(iter)));
    for (Index i = 0; i < batch_size; ++i) {
        std::uniform_int_distribution<Index> pick(i, n - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    idx.resize(static_cast<std::size_t>(batch_size));
    return idx;
}

void train(TrainState& state, const Dataset& data, const TrainOptions& options)
{
    const TrainConfig& cfg = state.config;
    cfg.validate();
    const ModelSpec& spec = state.model.spec();
    if (data.dim() != spec.arch.input_dim)
        throw ShapeError(detail::concat("train: data has ", data.dim(), " features, model expects ",
                                        spec.arch.input_dim));
    const std::set<ParamGroup> groups = cfg.trainable();

    std::ofstream metrics;
    if (!options.metrics_path.empty()) {
        const bool resume = state.iteration > 0;
        metrics.open(options.metrics_path, resume ? std::ios::app : std::ios::trunc);
        if (!metrics)
            throw ValidationError("cannot write metric stream '" + options.metrics_path + "'");
        if (!resume)
            metrics << metric_header << '\n';
    }
    const auto checkpoint = [&] {
        if (!options.checkpoint_path.empty())
            save_checkpoint(options.checkpoint_path, to_checkpoint(state));
    };

    const Index end = std::min(cfg.iterations, options.stop_at.value_or(cfg.iterations));
    const auto start = std::chrono::steady_clock::now();
    while (state.iteration < end) {
        const Index iter = state.iteration;
        const std::vector<Index> rows = minibatch(data.size(), cfg.batch_size, cfg.seed, iter);
        const Dataset batch = data.rows(rows);

        ad::Tape tape;
        const BoundModel bound = ddvi::bind(tape, state.model, groups);
        elbo::ElboTerms terms;
        try {
            terms = elbo::evaluate_bound(bound, spec, batch.x, batch.y, data.size(), cfg.n_mc,
                                         derive_seed(derive_seed(cfg.seed, elbo_stream),
                                                     static_cast<std::uint64_t>(iter)));
        } catch (const NumericalError& e) {
            checkpoint();
            throw NumericalError(detail::concat("iteration ", iter + 1, ": ", e.what(),
                                                "; last good state saved"));
        }
        const elbo::ElboBreakdown b = terms.values();
        std::vector<Matrix> grads;
        if (std::isfinite(b.total)) {
            tape.backward(terms.total);
            for (const ad::Var& v : bound.vars)
                grads.push_back(tape.requires_grad(v) ? v.grad() : Matrix());
        }
        if (!std::isfinite(b.total) || !all_finite(grads)) {
            checkpoint();
            throw NumericalError(detail::concat("iteration ", iter + 1, ": non-finite ",
                                                std::isfinite(b.total) ? "gradient" : "bound",
                                                "; last good state saved"));
        }
        state.adam.lr = cfg.learning_rate(iter);
        state.adam.ascend(state.model.params(), grads);
        state.iteration = iter + 1;

        const MetricRow row{state.iteration, b,
                            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                                .count()};
        if (metrics.is_open())
            metrics << metric_line(row) << '\n';
        if (options.on_iteration)
            options.on_iteration(row);
        if (state.iteration % cfg.checkpoint_every == 0 && state.iteration < end)
            checkpoint();
    }
    checkpoint();
}

} // namespace ddvi::pipeline
