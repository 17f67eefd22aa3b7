#include "ddvi/pipeline/optimizer.hpp"

#include <cmath>

namespace ddvi::pipeline
{

AdamState AdamState::zeros(const ParameterStore& params, double lr)
{
    AdamState s;
    s.lr = lr;
    for (const Parameter& p : params.all()) {
        s.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        s.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    return s;
}

void AdamState::ascend(ParameterStore& params, const std::vector<Matrix>& grads)
{
    if (grads.size() != params.size() || m.size() != params.size())
        throw ShapeError(detail::concat("adam: ", grads.size(), " gradients, ", m.size(), " moment slots for ",
                                        params.size(), " parameters"));
    ++step;
    const double t = static_cast<double>(step);
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].size() == 0)
            continue;
        Matrix& value = params.all()[i].value;
        if (grads[i].rows() != value.rows() || grads[i].cols() != value.cols())
            throw ShapeError("adam: gradient shape differs from parameter '" + params.all()[i].name + "'");
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
        value.array() += lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
}

} // namespace ddvi::pipeline
