#ifndef DDVI_PIPELINE_OPTIMIZER_HPP
#define DDVI_PIPELINE_OPTIMIZER_HPP

#include <cstdint>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/model.hpp"

namespace ddvi::pipeline
{

/// Adam moments for every parameter of a store, index-aligned with it.
struct AdamState
{
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::uint64_t step = 0;

    static AdamState zeros(const ParameterStore& params, double lr);

    /// One ascent step, theta += lr * m_hat / (sqrt(v_hat) + eps). Parameters
    /// whose gradient is empty are left untouched along with their moments.
    void ascend(ParameterStore& params, const std::vector<Matrix>& grads);
};

} // namespace ddvi::pipeline

#endif // DDVI_PIPELINE_OPTIMIZER_HPP
