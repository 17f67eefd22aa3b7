#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <zlib.h>

#include "ddvi/elbo.hpp"
#include "ddvi/pipeline/checkpoint.hpp"
#include "ddvi/pipeline/config.hpp"
#include "ddvi/pipeline/dataset.hpp"
#include "ddvi/pipeline/optimizer.hpp"
#include "ddvi/pipeline/predict.hpp"
#include "ddvi/pipeline/train.hpp"
#include "ddvi/random.hpp"

using namespace ddvi;
using namespace ddvi::pipeline;
namespace fs = std::filesystem;

namespace
{

class TempDir
{
public:
    TempDir()
    {
        path_ = fs::temp_directory_path() /
                ("ddvi_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    fs::path path_;
};

void write_file(const std::string& path, const std::string& text)
{
    std::ofstream(path) << text;
}

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Dataset sine_data(Index n, std::uint64_t seed)
{
    NormalStream rng(seed);
    Dataset d;
    d.x.resize(n, 1);
    d.y.resize(n, 1);
    for (Index i = 0; i < n; ++i) {
        d.x(i, 0) = -3.0 + 6.0 * static_cast<double>(i) / static_cast<double>(n - 1);
        d.y(i, 0) = std::sin(2.0 * d.x(i, 0)) + 0.1 * rng.next();
    }
    return d;
}

TrainConfig small_config()
{
    TrainConfig c;
    c.layers = 2;
    c.num_inducing = 8;
    c.batch_size = 16;
    c.iterations = 20;
    c.n_mc = 2;
    c.steps = 6;
    c.score_hidden = 16;
    c.checkpoint_every = 5;
    c.seed = 11;
    return c;
}

} // namespace

TEST(Dataset, LoadsSmallFile)
{
    TempDir dir;
    write_file(dir.file("a.csv"), "1,2,3\n4,5,6\n");
    const Dataset d = load_csv(dir.file("a.csv"), {});
    EXPECT_EQ(d.size(), 2);
    EXPECT_EQ(d.dim(), 2);
    EXPECT_EQ(d.y(1, 0), 6.0);

    write_file(dir.file("h.csv"), "f1,f2,y\n1,2,3\n");
    const Dataset h = load_csv(dir.file("h.csv"), {.header = true});
    EXPECT_EQ(h.size(), 1);
    EXPECT_THROW(load_csv(dir.file("h.csv"), {}), ValidationError);
}

TEST(Dataset, RejectsMalformedFiles)
{
    TempDir dir;
    write_file(dir.file("ragged.csv"), "1,2,3\n4,5\n");
    try {
        load_csv(dir.file("ragged.csv"), {});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
    write_file(dir.file("target.csv"), "1,2,3\n4,5,x\n");
    try {
        load_csv(dir.file("target.csv"), {});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("target"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
    write_file(dir.file("empty.csv"), "");
    EXPECT_THROW(load_csv(dir.file("empty.csv"), {}), ValidationError);
    EXPECT_THROW(load_csv(dir.file("missing.csv"), {}), ValidationError);
    write_file(dir.file("label.csv"), "1,2,0.5\n");
    EXPECT_THROW(load_csv(dir.file("label.csv"), {.task = gp::Task::classification}), ValidationError);
}

TEST(Dataset, ReadsGzip)
{
    TempDir dir;
    const std::string text = "0.5,1,0\n-2,3,2\n";
    gzFile f = gzopen(dir.file("d.csv.gz").c_str(), "wb");
    gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
    gzclose(f);
    const Dataset d = load_csv(dir.file("d.csv.gz"), {.task = gp::Task::classification});
    EXPECT_EQ(d.size(), 2);
    EXPECT_EQ(d.num_classes, 3);
    EXPECT_EQ(d.x(1, 0), -2.0);
}

TEST(Dataset, ScalingAndConstantFeature)
{
    Matrix x(3, 2);
    x << 1, 5, 3, 5, 2, 5;
    const FeatureScaling s = fit_feature_scaling(x);
    const Matrix z = s.apply(x);
    EXPECT_EQ(z.col(0), (Vector(3) << -1, 1, 0).finished());
    EXPECT_EQ(z.col(1), Vector::Zero(3));
    // Out-of-range points pass through unclamped.
    const Matrix out = s.apply((Matrix(1, 2) << 5, 5).finished());
    EXPECT_EQ(out(0, 0), 3.0);
}

TEST(Dataset, SplitSizesAndDeterminism)
{
    Dataset d = sine_data(10, 1);
    const Split a = split(d, 0.9, 4);
    EXPECT_EQ(a.train.size(), 9);
    EXPECT_EQ(a.test.size(), 1);
    const Split b = split(d, 0.9, 4);
    EXPECT_EQ(a.train.x, b.train.x);
    EXPECT_EQ(a.test.y, b.test.y);
    const Split c = split(d, 0.9, 5);
    EXPECT_NE(a.train.x, c.train.x);
    EXPECT_THROW(split(d.rows({0}), 0.9, 1), ValidationError);
}

TEST(Dataset, PreprocessorUsesTrainStatistics)
{
    const Dataset d = sine_data(50, 2);
    const Split s = split(d, 0.9, 1);
    const Preprocessor p = Preprocessor::fit(s.train, 0);
    const Dataset tr = p.apply(s.train);
    EXPECT_NEAR(tr.x.minCoeff(), -1.0, 1e-15);
    EXPECT_NEAR(tr.x.maxCoeff(), 1.0, 1e-15);
    EXPECT_NEAR(tr.y.mean(), 0.0, 1e-12);
    EXPECT_NEAR((tr.y.array() - tr.y.mean()).square().mean(), 1.0, 1e-12);
    EXPECT_LT((p.targets.invert(tr.y) - s.train.y).norm(), 1e-12);
}

TEST(Dataset, PcaKeepsLeadingDirections)
{
    NormalStream rng(3);
    Matrix x = rng.matrix(400, 3);
    x.col(0) *= 5.0;
    x.col(2) *= 2.0;
    const Pca p = fit_pca(x, 2);
    EXPECT_LT((p.components.transpose() * p.components - Matrix::Identity(2, 2)).norm(), 1e-12);
    EXPECT_GT(std::abs(p.components(0, 0)), 0.99);
    EXPECT_GT(std::abs(p.components(2, 1)), 0.99);
    EXPECT_EQ(p.apply(x).cols(), 2);
    EXPECT_THROW(fit_pca(x, 4), ValidationError);
}

TEST(Config, RoundTripAndErrors)
{
    TrainConfig c = small_config();
    c.method = Method::dsvi;
    c.lambda = 0.25;
    c.train_groups = "score,kernel";
    const TrainConfig back = TrainConfig::from_text(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.trainable(), (std::set<ParamGroup>{ParamGroup::score, ParamGroup::kernel}));

    const TrainConfig parsed = TrainConfig::from_text("# comment\nlayers = 3\n  lr=0.5  # trailing\n");
    EXPECT_EQ(parsed.layers, 3);
    EXPECT_EQ(parsed.lr, 0.5);
    EXPECT_EQ(parsed.num_inducing, 128);
    EXPECT_EQ(parsed.batch_size, 256);
    EXPECT_EQ(parsed.iterations, 20000);
    EXPECT_THROW(TrainConfig::from_text("bogus = 1\n"), ValidationError);
    EXPECT_THROW(TrainConfig::from_text("lr_schedule = step\n"), ValidationError);
    EXPECT_THROW(TrainConfig::from_text("layers = two\n"), ValidationError);
    EXPECT_THROW(TrainConfig::from_text("layers 2\n"), ValidationError);
    TrainConfig bad;
    bad.task = gp::Task::classification;
    EXPECT_THROW(bad.validate(), ValidationError);
    bad = TrainConfig{};
    bad.batch_size = 0;
    EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    Checkpoint c;
    c.config = "layers = 2\n";
    c.put("a", (Matrix(2, 3) << 1, 2, 3, 4, 5, 6).finished());
    c.put("tiny", Matrix::Constant(1, 1, 5e-324));
    c.put("empty", Matrix(0, 4));
    EXPECT_EQ(c.get("a").data, (std::vector<double>{1, 2, 3, 4, 5, 6}));
    const Checkpoint back = deserialize(serialize(c));
    EXPECT_EQ(back, c);
    EXPECT_EQ(back.matrix("a"), c.matrix("a"));

    TempDir dir;
    save_checkpoint(dir.file("c.bin"), c);
    EXPECT_EQ(load_checkpoint(dir.file("c.bin")), c);
    EXPECT_FALSE(fs::exists(dir.file("c.bin.tmp")));
    const std::string bytes = read_file(dir.file("c.bin"));
    EXPECT_EQ(bytes.substr(0, 5), "DDVI1");
    EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 3)), ValidationError);
    EXPECT_THROW(deserialize("DDVI2" + bytes.substr(5)), ValidationError);
}

TEST(Config, CosineSchedule)
{
    TrainConfig c;
    c.lr = 0.2;
    c.iterations = 100;
    EXPECT_EQ(c.learning_rate(50), 0.2);
    c.lr_schedule = LrSchedule::cosine;
    EXPECT_EQ(c.learning_rate(0), 0.2);
    EXPECT_NEAR(c.learning_rate(50), 0.1, 1e-15);
    EXPECT_NEAR(c.learning_rate(100), 0.0, 1e-15);
    EXPECT_EQ(TrainConfig::from_text(c.to_text()).lr_schedule, LrSchedule::cosine);
}

TEST(Adam, FirstStepAndZeroRate)
{
    ParameterStore p;
    p.add("w", ParamGroup::kernel, (Matrix(1, 2) << 1.0, -1.0).finished());
    AdamState a = AdamState::zeros(p, 0.1);
    a.ascend(p, {(Matrix(1, 2) << 2.0, -0.5).finished()});
    EXPECT_NEAR(p.value("w")(0, 0), 1.1, 1e-8);
    EXPECT_NEAR(p.value("w")(0, 1), -1.1, 1e-7);

    AdamState z = AdamState::zeros(p, 0.0);
    const Matrix before = p.value("w");
    z.ascend(p, {(Matrix(1, 2) << 2.0, -0.5).finished()});
    EXPECT_EQ(p.value("w"), before);
}

TEST(Train, ZeroLearningRateLeavesParameters)
{
    TrainConfig c = small_config();
    c.lr = 0.0;
    const Dataset d = sine_data(30, 3);
    const Preprocessor pre = Preprocessor::fit(d, 0);
    const Dataset data = pre.apply(d);
    TrainState s = init_state(c, data, pre);
    const ParameterStore before = s.model.params();
    train(s, data);
    EXPECT_EQ(s.iteration, c.iterations);
    for (std::size_t i = 0; i < before.size(); ++i)
        EXPECT_EQ(s.model.params().all()[i].value, before.all()[i].value) << before.all()[i].name;
}

TEST(Train, DeterministicResumableAndLogged)
{
    const Dataset d = sine_data(40, 4);
    const Preprocessor pre = Preprocessor::fit(d, 0);
    const Dataset data = pre.apply(d);
    TempDir dir;
    for (const Method method : {Method::ddvi, Method::dsvi}) {
        TrainConfig c = small_config();
        c.method = method;
        if (method == Method::ddvi)
            c.lr_schedule = LrSchedule::cosine;
        TrainState a = init_state(c, data, pre);
        train(a, data, {dir.file("m.csv"), dir.file("a.bin"), {}});
        TrainState b = init_state(c, data, pre);
        train(b, data, {{}, dir.file("b.bin"), {}});
        EXPECT_EQ(read_file(dir.file("a.bin")), read_file(dir.file("b.bin"))) << to_string(method);

        // Pause at 10, reload, continue to 20.
        TrainState h = init_state(c, data, pre);
        train(h, data, {{}, dir.file("h.bin"), {}, 10});
        TrainState resumed = from_checkpoint(load_checkpoint(dir.file("h.bin")));
        EXPECT_EQ(resumed.iteration, 10);
        train(resumed, data, {{}, dir.file("r.bin"), {}});
        Checkpoint ra = load_checkpoint(dir.file("a.bin"));
        Checkpoint rr = load_checkpoint(dir.file("r.bin"));
        EXPECT_EQ(ra.arrays, rr.arrays) << to_string(method);

        const TrainState reloaded = from_checkpoint(ra);
        EXPECT_EQ(serialize(to_checkpoint(reloaded)), serialize(ra));
    }
    std::istringstream metrics(read_file(dir.file("m.csv")));
    std::string line;
    std::getline(metrics, line);
    EXPECT_EQ(line, metric_header);
    Index last = 0;
    int rows = 0;
    while (std::getline(metrics, line)) {
        const Index iter = std::stoll(line.substr(0, line.find(',')));
        EXPECT_GT(iter, last);
        last = iter;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
        ++rows;
    }
    EXPECT_EQ(rows, 20);
}

TEST(Train, SineRegressionImproves)
{
    const Dataset d = sine_data(120, 6);
    const Preprocessor pre = Preprocessor::fit(d, 0);
    const Dataset data = pre.apply(d);
    for (const Method method : {Method::ddvi, Method::dsvi}) {
        TrainConfig c;
        c.layers = 2;
        c.num_inducing = 10;
        c.batch_size = 64;
        c.iterations = 2000;
        c.n_mc = 2;
        c.score_hidden = 32;
        c.seed = 5;
        c.method = method;
        TrainState s = init_state(c, data, pre);
        std::vector<double> elbos;
        train(s, data, {{}, {}, [&](const MetricRow& r) { elbos.push_back(r.bound.total); }});
        ASSERT_EQ(elbos.size(), 2000u);
        double first = 0.0;
        for (int i = 0; i < 100; ++i)
            first += elbos[static_cast<std::size_t>(i)] / 100.0;
        double last = 0.0;
        for (int i = 1900; i < 2000; ++i)
            last += elbos[static_cast<std::size_t>(i)] / 100.0;
        EXPECT_GT(last, first) << to_string(method);
    }
}

TEST(Train, DsviFitsSine)
{
    const Dataset d = sine_data(120, 6);
    const Preprocessor pre = Preprocessor::fit(d, 0);
    const Dataset data = pre.apply(d);
    TrainConfig c;
    c.layers = 2;
    c.num_inducing = 10;
    c.batch_size = 64;
    c.iterations = 6000;
    c.n_mc = 2;
    c.seed = 5;
    c.method = Method::dsvi;
    TrainState s = init_state(c, data, pre);
    train(s, data);
    const Prediction p = predict(s.model, data.x, 16, 1);
    EXPECT_LT(*evaluate(p, data, pre.targets, false).rmse, 0.2);
}

TEST(Predict, DeterministicAndNormalized)
{
    TrainConfig c = small_config();
    c.task = gp::Task::classification;
    c.likelihood = LikelihoodKind::softmax;
    Dataset d = sine_data(30, 7);
    d.task = gp::Task::classification;
    d.num_classes = 3;
    for (Index i = 0; i < d.size(); ++i)
        d.y(i, 0) = static_cast<double>(i % 3);
    const Preprocessor pre = Preprocessor::fit(d, 0);
    const Dataset data = pre.apply(d);
    const TrainState s = init_state(c, data, pre);
    const Prediction a = predict(s.model, data.x, 1, 9);
    const Prediction b = predict(s.model, data.x, 1, 9);
    EXPECT_EQ(a.samples[0], b.samples[0]);
    const Prediction p = predict(s.model, data.x, 5, 9);
    EXPECT_LT((p.probabilities.rowwise().sum() - Vector::Ones(30)).cwiseAbs().maxCoeff(), 1e-12);
    const Metrics m = evaluate(p, data, pre.targets, false);
    EXPECT_TRUE(m.accuracy && m.nll && !m.rmse);
    EXPECT_THROW(evaluate(p, data, pre.targets, true), ValidationError);
}

TEST(Predict, ConjugateToyMatchesExactPredictiveMean)
{
    const Index n = 10;
    Matrix x(n, 1);
    for (Index i = 0; i < n; ++i)
        x(i, 0) = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    const Vector y = x.col(0).array().sin() + 0.3;
    const kernels::KernelHyper h{Vector::Constant(1, std::log(0.5)), 0.0};
    const double noise = 0.1;

    ModelSpec spec;
    spec.arch = gp::DgpArchitecture::make(1, 1, n, gp::Task::regression);
    spec.method = Method::dsvi;
    spec.jitter = 1e-10;
    DgpModel model = DgpModel::create(spec, {});
    model.params().value("layer1.inducing") = x;
    model.params().value("layer1.log_lengthscales") = h.log_lengthscales;
    model.params().value("layer1.log_signal_variance")(0, 0) = 0.0;
    model.params().value("likelihood.log_noise_variance")(0, 0) = std::log(noise);
    const auto q = elbo::optimal_conjugate_q(x, y, x, h, noise, 1e-10);
    model.params().value("dsvi.layer1.mean") = q.mean;
    model.params().value("dsvi.layer1.chol0") = Matrix(q.covariance.llt().matrixL());

    const Matrix xs = (Matrix(3, 1) << -0.55, 0.1, 0.62).finished();
    Matrix kxx = kernels::rbf_gram(x, x, h);
    kxx.diagonal().array() += noise;
    const Vector exact = kernels::rbf_gram(xs, x, h) * kxx.llt().solve(y);

    const Index s = 4000;
    const Prediction p = predict(model, xs, s, 3);
    for (Index i = 0; i < 3; ++i) {
        const double se = std::sqrt((p.variance(i, 0) - p.noise_variance) / static_cast<double>(s));
        EXPECT_LT(std::abs(p.mean(i, 0) - exact(i)), 3.0 * se) << "point " << i;
    }
}

TEST(Metrics, Examples)
{
    const Matrix y = (Matrix(3, 1) << 1, 2, 3).finished();
    EXPECT_EQ(rmse(y, y), 0.0);
    const double lp = std::log(0.2);
    const double lq = std::log(0.6);
    EXPECT_NEAR(log_mean_exp_nll((Matrix(2, 1) << lp, lq).finished()), -std::log(0.4), 1e-15);
    const Matrix labels = (Matrix(4, 1) << 0, 0, 1, 1).finished();
    EXPECT_EQ(auc((Vector(4) << 0.1, 0.2, 0.8, 0.9).finished(), labels), 1.0);
    EXPECT_EQ(auc((Vector(4) << 0.9, 0.8, 0.2, 0.1).finished(), labels), 0.0);
    EXPECT_EQ(auc((Vector(4) << 0.5, 0.5, 0.5, 0.5).finished(), labels), 0.5);
    EXPECT_THROW(auc((Vector(3) << 0.1, 0.2, 0.3).finished(), (Matrix(3, 1) << 0, 1, 2).finished()),
                 ValidationError);
    const Matrix probs = (Matrix(3, 2) << 0.9, 0.1, 0.2, 0.8, 0.6, 0.4).finished();
    EXPECT_NEAR(accuracy(probs, (Matrix(3, 1) << 0, 1, 1).finished()), 2.0 / 3.0, 1e-15);
}
