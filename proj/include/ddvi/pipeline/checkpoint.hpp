#ifndef DDVI_PIPELINE_CHECKPOINT_HPP
#define DDVI_PIPELINE_CHECKPOINT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "ddvi/common.hpp"

namespace ddvi::pipeline
{

inline constexpr char checkpoint_magic[] = "DDVI1";

/// Array of 64-bit floats stored in row-major order.
struct NamedArray
{
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;

    bool operator==(const NamedArray&) const = default;
};

struct Checkpoint
{
    std::string config;
    std::vector<NamedArray> arrays;

    void put(const std::string& name, const Matrix& m);
    bool has(const std::string& name) const;
    const NamedArray& get(const std::string& name) const;
    /// Rank-2 (or rank-1 as a column) array as a matrix.
    Matrix matrix(const std::string& name) const;

    bool operator==(const Checkpoint&) const = default;
};

/// Layout: magic "DDVI1"; u64 config length and UTF-8 bytes; then per array
/// u64 name length, name bytes, u64 rank, rank x u64 dims, raw doubles. All
/// integers and doubles little-endian. Written to a temporary file and renamed
/// into place.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_CHECKPOINT_HPP
