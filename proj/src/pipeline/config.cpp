#include "ddvi/pipeline/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <vector>

namespace ddvi::pipeline
{

namespace
{

std::string trim(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value)
{
    T out{};
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size())
        throw ValidationError("config: '" + key + "' expects an integer, got '" + value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value)
{
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(out))
        throw ValidationError("config: '" + key + "' expects a number, got '" + value + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value)
{
    if (value == "true" || value == "1")
        return true;
    if (value == "false" || value == "0")
        return false;
    throw ValidationError("config: '" + key + "' expects true or false, got '" + value + "'");
}

std::string format_real(double v)
{
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

struct Field
{
    const char* key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

#define DDVI_INT_FIELD(name)                                                                                         \
    Field{#name, [](const TrainConfig& c) { return std::to_string(c.name); },                                      \
          [](TrainConfig& c, const std::string& v) { c.name = parse_integer<decltype(c.name)>(#name, v); }}
#define DDVI_REAL_FIELD(name)                                                                                        \
    Field{#name, [](const TrainConfig& c) { return format_real(c.name); },                                         \
          [](TrainConfig& c, const std::string& v) { c.name = parse_real(#name, v); }}

const std::vector<Field>& fields()
{
    static const std::vector<Field> all = {
        DDVI_INT_FIELD(layers),
        DDVI_INT_FIELD(num_inducing),
        DDVI_INT_FIELD(hidden_cap),
        Field{"task", [](const TrainConfig& c) { return gp::to_string(c.task); },
              [](TrainConfig& c, const std::string& v) { c.task = gp::task_from_string(v); }},
        Field{"likelihood", [](const TrainConfig& c) { return to_string(c.likelihood); },
              [](TrainConfig& c, const std::string& v) { c.likelihood = likelihood_from_string(v); }},
        Field{"method", [](const TrainConfig& c) { return to_string(c.method); },
              [](TrainConfig& c, const std::string& v) { c.method = method_from_string(v); }},
        DDVI_INT_FIELD(score_hidden),
        DDVI_INT_FIELD(score_depth),
        DDVI_REAL_FIELD(jitter),
        DDVI_REAL_FIELD(init_noise_variance),
        DDVI_REAL_FIELD(init_lengthscale),
        DDVI_REAL_FIELD(lambda),
        DDVI_REAL_FIELD(g),
        DDVI_REAL_FIELD(horizon),
        DDVI_INT_FIELD(steps),
        DDVI_REAL_FIELD(sigma2_fix),
        DDVI_REAL_FIELD(lr),
        Field{"lr_schedule", [](const TrainConfig& c) { return to_string(c.lr_schedule); },
              [](TrainConfig& c, const std::string& v) { c.lr_schedule = lr_schedule_from_string(v); }},
        DDVI_INT_FIELD(batch_size),
        DDVI_INT_FIELD(iterations),
        DDVI_INT_FIELD(n_mc),
        DDVI_INT_FIELD(seed),
        Field{"train_groups", [](const TrainConfig& c) { return c.train_groups; },
              [](TrainConfig& c, const std::string& v) { c.train_groups = v; }},
        Field{"header", [](const TrainConfig& c) { return std::string(c.header ? "true" : "false"); },
              [](TrainConfig& c, const std::string& v) { c.header = parse_bool("header", v); }},
        DDVI_REAL_FIELD(split_ratio),
        DDVI_INT_FIELD(pca_components),
        DDVI_INT_FIELD(checkpoint_every),
        DDVI_INT_FIELD(eval_samples),
    };
    return all;
}

#undef DDVI_INT_FIELD
#undef DDVI_REAL_FIELD

} // namespace

std::string to_string(LrSchedule schedule)
{
    return schedule == LrSchedule::cosine ? "cosine" : "constant";
}

LrSchedule lr_schedule_from_string(const std::string& name)
{
    if (name == "constant")
        return LrSchedule::constant;
    if (name == "cosine")
        return LrSchedule::cosine;
    throw ValidationError("config: 'lr_schedule' must be constant or cosine, got '" + name + "'");
}

double TrainConfig::learning_rate(Index iter) const
{
    if (lr_schedule == LrSchedule::constant || iterations == 0)
        return lr;
    const double progress = static_cast<double>(iter) / static_cast<double>(iterations);
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ParamGroup param_group_from_string(const std::string& name)
{
    for (const ParamGroup g : {ParamGroup::score, ParamGroup::kernel, ParamGroup::inducing, ParamGroup::likelihood,
                               ParamGroup::variational})
        if (to_string(g) == name)
            return g;
    throw ValidationError("unknown parameter group '" + name + "'");
}

std::set<ParamGroup> TrainConfig::trainable() const
{
    std::set<ParamGroup> out;
    if (trim(train_groups) == "all")
        return out;
    std::istringstream in(train_groups);
    std::string item;
    while (std::getline(in, item, ','))
        if (!trim(item).empty())
            out.insert(param_group_from_string(trim(item)));
    if (out.empty())
        throw ValidationError("config: 'train_groups' names no group");
    return out;
}

void TrainConfig::validate() const
{
    const auto positive = [](const char* key, double v) {
        if (!(v > 0.0))
            throw ValidationError(detail::concat("config: '", key, "' must be positive, got ", v));
    };
    if (layers < 1)
        throw ValidationError(detail::concat("config: 'layers' must be >= 1, got ", layers));
    positive("num_inducing", static_cast<double>(num_inducing));
    positive("hidden_cap", static_cast<double>(hidden_cap));
    positive("score_hidden", static_cast<double>(score_hidden));
    positive("score_depth", static_cast<double>(score_depth));
    positive("jitter", jitter);
    positive("init_noise_variance", init_noise_variance);
    positive("init_lengthscale", init_lengthscale);
    if (lr < 0.0)
        throw ValidationError(detail::concat("config: 'lr' must be >= 0, got ", lr));
    positive("batch_size", static_cast<double>(batch_size));
    if (iterations < 0)
        throw ValidationError(detail::concat("config: 'iterations' must be >= 0, got ", iterations));
    positive("n_mc", static_cast<double>(n_mc));
    positive("checkpoint_every", static_cast<double>(checkpoint_every));
    positive("eval_samples", static_cast<double>(eval_samples));
    if (!(split_ratio > 0.0 && split_ratio < 1.0))
        throw ValidationError(detail::concat("config: 'split_ratio' must lie in (0, 1), got ", split_ratio));
    if (pca_components < 0)
        throw ValidationError("config: 'pca_components' must be >= 0");
    schedule().validate();
    (void)trainable();
    if ((task == gp::Task::classification) != (likelihood == LikelihoodKind::softmax))
        throw ValidationError("config: classification requires likelihood = softmax and vice versa");
}

std::string TrainConfig::to_text() const
{
    std::string out;
    for (const Field& f : fields())
        out += std::string(f.key) + " = " + f.get(*this) + "\n";
    return out;
}

void TrainConfig::set(const std::string& key, const std::string& value)
{
    for (const Field& f : fields())
        if (key == f.key) {
            f.set(*this, trim(value));
            return;
        }
    throw ValidationError("config: unknown key '" + key + "'");
}

TrainConfig TrainConfig::from_text(const std::string& text)
{
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        if (trim(line).empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(detail::concat("config line ", line_no, ": expected 'key = value'"));
        cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return cfg;
}

TrainConfig TrainConfig::from_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ValidationError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

} // namespace ddvi::pipeline
