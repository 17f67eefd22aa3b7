#ifndef DDVI_PIPELINE_DATASET_HPP
#define DDVI_PIPELINE_DATASET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/gplayers.hpp"

namespace ddvi::pipeline
{

struct CsvSchema
{
    bool header = false;
    gp::Task task = gp::Task::regression;
};

/// Features and a single target column. Class labels are stored as integral
/// doubles in 0..num_classes-1.
struct Dataset
{
    Matrix x;
    Matrix y; ///< N x 1
    std::string name;
    gp::Task task = gp::Task::regression;
    Index num_classes = 0;

    Index size() const { return x.rows(); }
    Index dim() const { return x.cols(); }
    Dataset rows(const std::vector<Index>& idx) const;
};

/// Reads a numeric CSV whose last column is the target. Files ending in .gz
/// are decompressed on the fly. Errors name the offending row (1-based line).
Dataset load_csv(const std::string& path, const CsvSchema& schema);

/// Writes features and target back out, one row per line, no header.
void save_csv(const std::string& path, const Dataset& data);

/// Projection onto leading principal directions of a training matrix.
struct Pca
{
    Vector mean;       ///< D
    Matrix components; ///< D x k, orthonormal columns

    bool active() const { return components.size() > 0; }
    Matrix apply(const Matrix& x) const;
};

Pca fit_pca(const Matrix& x, Index k);

/// Per-feature min/max map to [-1, 1]. A constant feature maps to 0.
struct FeatureScaling
{
    Vector min;
    Vector max;

    Matrix apply(const Matrix& x) const;
};

FeatureScaling fit_feature_scaling(const Matrix& x);

/// Zero mean, unit variance for regression targets; identity for labels.
struct TargetScaling
{
    double mean = 0.0;
    double std = 1.0;

    Matrix apply(const Matrix& y) const { return (y.array() - mean) / std; }
    Matrix invert(const Matrix& y) const { return y.array() * std + mean; }
};

/// Raw-to-model preprocessing: optional PCA, then feature scaling; target
/// standardization for regression. All statistics come from training rows.
struct Preprocessor
{
    Pca pca;
    FeatureScaling features;
    TargetScaling targets;

    static Preprocessor fit(const Dataset& train, Index pca_components);
    Dataset apply(const Dataset& raw) const;
};

struct Split
{
    Dataset train;
    Dataset test;
};

/// Seeded permutation, ceil(ratio N) training rows and the rest for testing.
/// Rows are raw (unnormalized).
Split split(const Dataset& data, double ratio, std::uint64_t seed);

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_DATASET_HPP
