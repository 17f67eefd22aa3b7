#ifndef DDVI_PIPELINE_TRAIN_HPP
#define DDVI_PIPELINE_TRAIN_HPP

#include <functional>
#include <optional>
#include <string>

#include "ddvi/elbo.hpp"
#include "ddvi/model.hpp"
#include "ddvi/pipeline/checkpoint.hpp"
#include "ddvi/pipeline/config.hpp"
#include "ddvi/pipeline/dataset.hpp"
#include "ddvi/pipeline/optimizer.hpp"

namespace ddvi::pipeline
{

inline constexpr char metric_header[] = "iter,elbo,prior,lik,l1,fix,wall_ms";

/// Everything needed to continue or evaluate a run.
struct TrainState
{
    TrainConfig config;
    DgpModel model;
    Preprocessor preprocessor;
    AdamState adam;
    Index iteration = 0; ///< completed iterations
};

ModelSpec model_spec(const TrainConfig& config, Index input_dim, Index num_classes);

/// Fresh state for a preprocessed training set. Layer-1 inducing inputs are
/// drawn from the training rows.
TrainState init_state(const TrainConfig& config, const Dataset& train, const Preprocessor& preprocessor);

Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const Checkpoint& ckpt);

struct MetricRow
{
    Index iter = 0;
    elbo::ElboBreakdown bound;
    double wall_ms = 0.0;
};

struct TrainOptions
{
    /// Metric CSV path; empty disables the stream. Appended to when resuming.
    std::string metrics_path;
    /// Checkpoint path written every config.checkpoint_every iterations and at
    /// the end; empty disables checkpoints.
    std::string checkpoint_path;
    std::function<void(const MetricRow&)> on_iteration;
    /// Pause after this many completed iterations (the schedule still spans
    /// config.iterations); a checkpoint is written at the pause.
    std::optional<Index> stop_at;
};

/// Rows of `train` used at iteration `iter`: all rows when batch_size >= N,
/// otherwise a seeded draw without replacement.
std::vector<Index> minibatch(Index n, Index batch_size, std::uint64_t seed, Index iter);

/// Runs Adam on the bound from state.iteration up to config.iterations. On a
/// non-finite bound or gradient the last good state is checkpointed and a
/// NumericalError naming the iteration is thrown.
void train(TrainState& state, const Dataset& train, const TrainOptions& options = {});

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_TRAIN_HPP
