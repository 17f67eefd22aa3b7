#ifndef DDVI_PIPELINE_CONFIG_HPP
#define DDVI_PIPELINE_CONFIG_HPP

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "ddvi/common.hpp"
#include "ddvi/diffusion.hpp"
#include "ddvi/model.hpp"

namespace ddvi::pipeline
{

enum class LrSchedule
{
    constant,
    cosine, ///< lr * (1 + cos(pi * iter / iterations)) / 2
};

std::string to_string(LrSchedule schedule);
LrSchedule lr_schedule_from_string(const std::string& name);

/// Every knob of a training run. Serialized as flat `key = value` lines.
struct TrainConfig
{
    // model
    Index layers = 2;
    Index num_inducing = 128;
    Index hidden_cap = 8;
    gp::Task task = gp::Task::regression;
    LikelihoodKind likelihood = LikelihoodKind::gaussian;
    Method method = Method::ddvi;
    Index score_hidden = 128;
    Index score_depth = 2;
    double jitter = 1e-6;
    double init_noise_variance = 0.1;
    double init_lengthscale = 1.0;

    // diffusion
    double lambda = 0.5;
    double g = 1.0;
    double horizon = 1.0;
    Index steps = 30;
    double sigma2_fix = 1.0;

    // optimization
    double lr = 0.01;
    LrSchedule lr_schedule = LrSchedule::constant;
    Index batch_size = 256;
    Index iterations = 20000;
    Index n_mc = 4;
    std::uint64_t seed = 0;
    /// Parameter groups updated by Adam, comma separated; "all" for every group.
    std::string train_groups = "all";

    // data
    bool header = false;
    double split_ratio = 0.9;
    Index pca_components = 0;

    // output
    Index checkpoint_every = 1000;
    Index eval_samples = 128;

    diffusion::DiffusionSchedule schedule() const { return {lambda, g, horizon, steps, sigma2_fix}; }
    std::set<ParamGroup> trainable() const;
    /// Adam step size for the update made at (0-based) iteration `iter`.
    double learning_rate(Index iter) const;
    /// Throws ValidationError naming the offending key.
    void validate() const;

    /// `key = value` lines for every field, in declaration order.
    std::string to_text() const;
    /// Applies one assignment; unknown keys and malformed values are rejected.
    void set(const std::string& key, const std::string& value);
    static TrainConfig from_text(const std::string& text);
    static TrainConfig from_file(const std::string& path);
};

ParamGroup param_group_from_string(const std::string& name);

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_CONFIG_HPP
