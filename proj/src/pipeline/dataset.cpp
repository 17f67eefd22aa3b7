#include "ddvi/pipeline/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <zlib.h>

#include "ddvi/random.hpp"

namespace ddvi::pipeline
{

namespace
{

bool ends_with(const std::string& s, const std::string& suffix)
{
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string read_all(const std::string& path)
{
    if (ends_with(path, ".gz")) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (f == nullptr)
            throw ValidationError("cannot open data file '" + path + "'");
        std::string out;
        char buf[1 << 16];
        int n = 0;
        while ((n = gzread(f, buf, sizeof buf)) > 0)
            out.append(buf, static_cast<std::size_t>(n));
        const bool failed = n < 0;
        gzclose(f);
        if (failed)
            throw ValidationError("corrupt gzip stream in '" + path + "'");
        return out;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ValidationError("cannot open data file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

bool parse_double(std::string_view cell, double& out)
{
    cell = trim(cell);
    if (cell.empty())
        return false;
    if (cell.front() == '+')
        cell.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
    return ec == std::errc() && ptr == cell.data() + cell.size() && std::isfinite(out);
}

} // namespace

Dataset Dataset::rows(const std::vector<Index>& idx) const
{
    Dataset out;
    out.name = name;
    out.task = task;
    out.num_classes = num_classes;
    out.x.resize(static_cast<Index>(idx.size()), x.cols());
    out.y.resize(static_cast<Index>(idx.size()), 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.x.row(static_cast<Index>(i)) = x.row(idx[i]);
        out.y(static_cast<Index>(i), 0) = y(idx[i], 0);
    }
    return out;
}

Dataset load_csv(const std::string& path, const CsvSchema& schema)
{
    const std::string text = read_all(path);
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    Index line_no = 0;
    std::size_t width = 0;
    bool header_pending = schema.header;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty())
            continue;
        if (header_pending) {
            header_pending = false;
            continue;
        }
        std::vector<double> row;
        std::string_view rest(line);
        for (;;) {
            const std::size_t comma = rest.find(',');
            const std::string_view cell = rest.substr(0, comma);
            double v = 0.0;
            if (!parse_double(cell, v)) {
                const bool target = comma == std::string_view::npos;
                throw ValidationError(detail::concat("'", path, "' line ", line_no, ": non-numeric ",
                                                     target ? "target" : "feature", " cell '", trim(cell), "'"));
            }
            row.push_back(v);
            if (comma == std::string_view::npos)
                break;
            rest.remove_prefix(comma + 1);
        }
        if (width == 0)
            width = row.size();
        else if (row.size() != width)
            throw ValidationError(detail::concat("'", path, "' line ", line_no, ": ", row.size(),
                                                 " columns, expected ", width));
        rows.push_back(std::move(row));
    }
    if (rows.empty())
        throw ValidationError("'" + path + "' contains no data rows");
    if (width < 2)
        throw ValidationError("'" + path + "' needs at least one feature column and a target column");

    Dataset data;
    data.name = path;
    data.task = schema.task;
    const auto n = static_cast<Index>(rows.size());
    const auto d = static_cast<Index>(width - 1);
    data.x.resize(n, d);
    data.y.resize(n, 1);
    for (Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        for (Index j = 0; j < d; ++j)
            data.x(i, j) = r[static_cast<std::size_t>(j)];
        data.y(i, 0) = r.back();
    }
    if (schema.task == gp::Task::classification) {
        double top = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double label = data.y(i, 0);
            if (label < 0.0 || label != std::floor(label))
                throw ValidationError(detail::concat("'", path, "' row ", i + 1, ": class label ", label,
                                                     " is not a non-negative integer"));
            top = std::max(top, label);
        }
        data.num_classes = std::max<Index>(2, static_cast<Index>(top) + 1);
    }
    return data;
}

void save_csv(const std::string& path, const Dataset& data)
{
    std::ofstream out(path);
    if (!out)
        throw ValidationError("cannot write '" + path + "'");
    out.precision(17);
    for (Index i = 0; i < data.size(); ++i) {
        for (Index j = 0; j < data.dim(); ++j)
            out << data.x(i, j) << ',';
        out << data.y(i, 0) << '\n';
    }
}

Matrix Pca::apply(const Matrix& x) const
{
    if (!active())
        return x;
    if (x.cols() != mean.size())
        throw ShapeError(detail::concat("pca: ", x.cols(), " features, fitted on ", mean.size()));
    return (x.rowwise() - mean.transpose()) * components;
}

Pca fit_pca(const Matrix& x, Index k)
{
    if (k < 1 || k > x.cols())
        throw ValidationError(detail::concat("pca: cannot keep ", k, " of ", x.cols(), " features"));
    Pca pca;
    pca.mean = x.colwise().mean().transpose();
    const Matrix centered = x.rowwise() - pca.mean.transpose();
    const Matrix cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(x.rows() - 1));
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    // Eigenvalues ascend; keep the last k columns, largest first, with a fixed sign.
    pca.components.resize(x.cols(), k);
    for (Index j = 0; j < k; ++j) {
        Vector v = eig.eigenvectors().col(x.cols() - 1 - j);
        Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0)
            v = -v;
        pca.components.col(j) = v;
    }
    return pca;
}

Matrix FeatureScaling::apply(const Matrix& x) const
{
    if (x.cols() != min.size())
        throw ShapeError(detail::concat("feature scaling: ", x.cols(), " features, fitted on ", min.size()));
    Matrix out(x.rows(), x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        const double range = max(j) - min(j);
        if (range > 0.0)
            out.col(j) = (2.0 * (x.col(j).array() - min(j)) / range - 1.0).matrix();
        else
            out.col(j) = (x.col(j).array() - min(j)).matrix(); // midpoint rule: the training value maps to 0
    }
    return out;
}

FeatureScaling fit_feature_scaling(const Matrix& x)
{
    if (x.rows() < 1)
        throw ValidationError("feature scaling: no rows");
    return {x.colwise().minCoeff().transpose(), x.colwise().maxCoeff().transpose()};
}

Preprocessor Preprocessor::fit(const Dataset& train, Index pca_components)
{
    Preprocessor p;
    if (pca_components > 0)
        p.pca = fit_pca(train.x, pca_components);
    p.features = fit_feature_scaling(p.pca.apply(train.x));
    if (train.task == gp::Task::regression) {
        p.targets.mean = train.y.mean();
        const double var = (train.y.array() - p.targets.mean).square().mean();
        p.targets.std = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return p;
}

Dataset Preprocessor::apply(const Dataset& raw) const
{
    Dataset out = raw;
    out.x = features.apply(pca.apply(raw.x));
    if (raw.task == gp::Task::regression)
        out.y = targets.apply(raw.y);
    return out;
}

Split split(const Dataset& data, double ratio, std::uint64_t seed)
{
    if (data.size() < 2)
        throw ValidationError("split: need at least 2 rows");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ValidationError(detail::concat("split: ratio must lie in (0, 1), got ", ratio));
    std::vector<Index> perm(static_cast<std::size_t>(data.size()));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(derive_seed(seed, 0x5B117));
    std::shuffle(perm.begin(), perm.end(), rng);
    auto n_train = static_cast<Index>(std::ceil(ratio * static_cast<double>(data.size()) - 1e-9));
    n_train = std::clamp<Index>(n_train, 1, data.size() - 1);
    const auto cut = perm.begin() + n_train;
    return {data.rows({perm.begin(), cut}), data.rows({cut, perm.end()})};
}

} // namespace ddvi::pipeline
