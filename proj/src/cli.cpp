#include "ddvi/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddvi/pipeline/audit.hpp"
#include "ddvi/pipeline/checkpoint.hpp"
#include "ddvi/pipeline/config.hpp"
#include "ddvi/pipeline/dataset.hpp"
#include "ddvi/pipeline/predict.hpp"
#include "ddvi/pipeline/train.hpp"

namespace ddvi::cli
{

namespace
{

using nlohmann::ordered_json;
using namespace ddvi::pipeline;
namespace fs = std::filesystem;

struct TrainArgs
{
    std::string config;
    std::string data;
    std::string method;
    std::string out;
    std::vector<std::string> overrides;
    bool resume = false;
};

struct EvalArgs
{
    std::string checkpoint;
    std::string data;
    Index n_samples = 0;
    std::uint64_t seed = 0;
    bool auc = false;
};

struct SampleArgs
{
    std::string checkpoint;
    Index n = 1;
    std::uint64_t seed = 0;
};

ordered_json metrics_json(const Metrics& m, Index n)
{
    ordered_json j;
    j["n"] = n;
    if (m.rmse)
        j["rmse"] = *m.rmse;
    if (m.nll)
        j["nll"] = *m.nll;
    if (m.accuracy)
        j["accuracy"] = *m.accuracy;
    if (m.auc)
        j["auc"] = *m.auc;
    return j;
}

TrainConfig train_config(const TrainArgs& a)
{
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_file(a.config);
    for (const std::string& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ValidationError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!a.method.empty())
        cfg.method = method_from_string(a.method);
    cfg.validate();
    return cfg;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err)
{
    const TrainConfig cfg = train_config(a);
    fs::create_directories(a.out);
    const std::string ckpt_path = (fs::path(a.out) / "checkpoint.bin").string();
    const Dataset raw = load_csv(a.data, {cfg.header, cfg.task});
    const Split parts = split(raw, cfg.split_ratio, cfg.seed);
    save_csv((fs::path(a.out) / "test.csv").string(), parts.test);

    TrainState state;
    if (a.resume && fs::exists(ckpt_path)) {
        state = from_checkpoint(load_checkpoint(ckpt_path));
        state.config.iterations = cfg.iterations;
        err << "resuming at iteration " << state.iteration << '\n';
    } else {
        const Preprocessor pre = Preprocessor::fit(parts.train, cfg.pca_components);
        state = init_state(cfg, pre.apply(parts.train), pre);
    }
    const Dataset train_set = state.preprocessor.apply(parts.train);
    TrainOptions options;
    options.metrics_path = (fs::path(a.out) / "metrics.csv").string();
    options.checkpoint_path = ckpt_path;
    if (!a.resume || !fs::exists(ckpt_path))
        fs::remove(options.metrics_path);
    train(state, train_set, options);

    const Dataset test_set = state.preprocessor.apply(parts.test);
    const Prediction pred = predict(state.model, test_set.x, cfg.eval_samples, derive_seed(cfg.seed, 0xE7A1));
    const bool binary = cfg.task == gp::Task::classification && raw.num_classes == 2;
    ordered_json j = metrics_json(evaluate(pred, test_set, state.preprocessor.targets, binary), test_set.size());
    j["iterations"] = state.iteration;
    j["method"] = to_string(cfg.method);
    out << j.dump() << '\n';
    return exit_ok;
}

int cmd_eval(const EvalArgs& a, std::ostream& out)
{
    const TrainState state = from_checkpoint(load_checkpoint(a.checkpoint));
    const TrainConfig& cfg = state.config;
    const Dataset data = state.preprocessor.apply(load_csv(a.data, {cfg.header, cfg.task}));
    const Index n = a.n_samples > 0 ? a.n_samples : cfg.eval_samples;
    const Prediction pred = predict(state.model, data.x, n, a.seed);
    out << metrics_json(evaluate(pred, data, state.preprocessor.targets, a.auc), data.size()).dump() << '\n';
    return exit_ok;
}

void report(std::ostream& out, const std::string& name, double deviation, double tolerance, bool pass)
{
    out << (pass ? "PASS " : "FAIL ") << name << " max_deviation=" << std::setprecision(3) << std::scientific
        << deviation << " tolerance=" << tolerance << std::defaultfloat << '\n';
}

int cmd_oracle_check(std::uint64_t seed, std::ostream& out)
{
    std::vector<OracleCheck> checks{kappa_oracle_check(seed)};
    for (const OracleCheck& c : conjugate_oracle_checks(seed))
        checks.push_back(c);
    bool ok = true;
    for (const OracleCheck& c : checks) {
        report(out, c.name, c.max_deviation, c.tolerance, c.passed());
        ok = ok && c.passed();
    }
    return ok ? exit_ok : exit_numerical;
}

int cmd_grad_audit(std::uint64_t seed, double tolerance, std::ostream& out)
{
    Matrix x;
    Matrix y;
    const DgpModel model = grad_audit_model(seed, x, y);
    bool ok = true;
    for (const GroupGradError& e : grad_audit(model, x, y, 8, 1, derive_seed(seed, 0x6A0D2))) {
        const bool pass = e.max_rel_error < tolerance;
        report(out, to_string(e.group) + " (" + std::to_string(e.coordinates) + " coords, worst " + e.worst_param + ")",
               e.max_rel_error, tolerance, pass);
        ok = ok && pass;
    }
    return ok ? exit_ok : exit_numerical;
}

int cmd_sample(const SampleArgs& a, std::ostream& out)
{
    const TrainState state = from_checkpoint(load_checkpoint(a.checkpoint));
    const Matrix draws = posterior_draws(state.model, a.n, a.seed);
    for (Index i = 0; i < draws.rows(); ++i)
        out << (i == 0 ? "" : ",") << 'u' << i;
    out << '\n' << std::setprecision(17);
    for (Index k = 0; k < draws.cols(); ++k) {
        for (Index i = 0; i < draws.rows(); ++i)
            out << (i == 0 ? "" : ",") << draws(i, k);
        out << '\n';
    }
    return exit_ok;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Deep Gaussian process inference with denoising diffusion", "ddvi"};
    app.require_subcommand(1);

    TrainArgs train_args;
    CLI::App* train_cmd = app.add_subcommand("train", "Train a model and report test-split metrics as JSON");
    train_cmd->add_option("--config", train_args.config, "Config file of key = value lines")->check(CLI::ExistingFile);
    train_cmd->add_option("--data", train_args.data, "CSV dataset, target in the last column")->required();
    train_cmd->add_option("--method", train_args.method, "ddvi or dsvi (overrides the config)")
        ->check(CLI::IsMember({"ddvi", "dsvi"}));
    train_cmd->add_option("--out", train_args.out, "Output directory")->required();
    train_cmd->add_option("--set", train_args.overrides, "Config override key=value, repeatable");
    train_cmd->add_flag("--resume", train_args.resume, "Continue from <out>/checkpoint.bin when present");

    EvalArgs eval_args;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Print metrics JSON for a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--data", eval_args.data, "CSV dataset in raw units")->required();
    eval_cmd->add_option("--n-samples", eval_args.n_samples, "Predictive samples (default: eval_samples)")
        ->check(CLI::PositiveNumber);
    eval_cmd->add_option("--seed", eval_args.seed, "Sampling seed");
    eval_cmd->add_flag("--auc", eval_args.auc, "Also report AUC (binary classification)");

    std::uint64_t oracle_seed = 0;
    CLI::App* oracle_cmd = app.add_subcommand("oracle-check", "Run the bridge-variance and conjugate oracles");
    oracle_cmd->add_option("--seed", oracle_seed, "Seed for the random instances");

    std::uint64_t audit_seed = 0;
    double audit_tolerance = 1e-4;
    CLI::App* audit_cmd = app.add_subcommand("grad-audit", "Finite-difference check of a frozen-seed bound");
    audit_cmd->add_option("--seed", audit_seed, "Seed for the audit instance");
    audit_cmd->add_option("--tolerance", audit_tolerance, "Maximum relative error")->check(CLI::PositiveNumber);

    SampleArgs sample_args;
    CLI::App* sample_cmd = app.add_subcommand("sample", "Emit posterior inducing-variable draws as CSV");
    sample_cmd->add_option("--checkpoint", sample_args.checkpoint, "Checkpoint file")->required();
    sample_cmd->add_option("--n", sample_args.n, "Number of draws")->check(CLI::PositiveNumber);
    sample_cmd->add_option("--seed", sample_args.seed, "Sampling seed");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_validation;
    }

    try {
        if (train_cmd->parsed())
            return cmd_train(train_args, out, err);
        if (eval_cmd->parsed())
            return cmd_eval(eval_args, out);
        if (oracle_cmd->parsed())
            return cmd_oracle_check(oracle_seed, out);
        if (audit_cmd->parsed())
            return cmd_grad_audit(audit_seed, audit_tolerance, out);
        if (sample_cmd->parsed())
            return cmd_sample(sample_args, out);
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return exit_numerical;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return exit_validation;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return exit_validation;
    }
    return exit_validation;
}

} // namespace ddvi::cli
