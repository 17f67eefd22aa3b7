#ifndef DDVI_RANDOM_HPP
#define DDVI_RANDOM_HPP

#include <cstdint>
#include <random>

#include "ddvi/common.hpp"

namespace ddvi
{

/// SplitMix64 finalizer (Steele, Lea & Flood). Used to derive independent
/// child seeds: derive_seed(master, k) for stream k.
constexpr std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream)
{
    return splitmix64(master ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

/// Standard normal draws from a seeded 64-bit Mersenne twister.
class NormalStream
{
public:
    explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

    double next() { return dist_(engine_); }
    /// Uniform on [0, 1).
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    Matrix matrix(Index rows, Index cols)
    {
        Matrix m(rows, cols);
        for (Index j = 0; j < cols; ++j)
            for (Index i = 0; i < rows; ++i)
                m(i, j) = next();
        return m;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> dist_;
};

} // namespace ddvi

#endif // DDVI_RANDOM_HPP
