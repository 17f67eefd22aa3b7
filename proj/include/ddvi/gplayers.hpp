#ifndef DDVI_GPLAYERS_HPP
#define DDVI_GPLAYERS_HPP

// Sparse GP layers: conditionals given inducing variables, reparameterized
// propagation through the stack, and the prior over inducing variables.

#include <string>
#include <vector>

#include "ddvi/common.hpp"
#include "ddvi/diffcore.hpp"
#include "ddvi/kernels.hpp"
#include "ddvi/random.hpp"

namespace ddvi::gp
{

enum class Task
{
    regression,
    classification,
};

std::string to_string(Task task);
Task task_from_string(const std::string& name);

/// Layer widths D_0 (input) .. D_L (output) and inducing count M per layer.
struct DgpArchitecture
{
    Index input_dim = 1;
    std::vector<Index> widths; ///< D_1 .. D_L
    Index num_inducing = 1;
    Task task = Task::regression;
    Index num_classes = 0;

    /// Hidden widths min(input_dim, hidden_cap); output width 1 for regression
    /// and num_classes for classification.
    static DgpArchitecture make(Index input_dim, Index layers, Index num_inducing, Task task,
                                Index num_classes = 0, Index hidden_cap = 8);

    Index layers() const { return static_cast<Index>(widths.size()); }
    Index in_dim(Index layer) const { return layer == 0 ? input_dim : widths[layer - 1]; }
    Index out_dim(Index layer) const { return widths[layer]; }
    Index output_dim() const { return widths.back(); }
    /// Offset of layer `layer`'s block in the flattened inducing vector.
    Index offset(Index layer) const;
    /// H = sum_l D_l * M.
    Index flat_dim() const;
    void validate() const;
};

/// Trainable quantities of one layer, bound to a tape.
struct LayerVars
{
    ad::Var inducing; ///< M x D_{l-1}
    kernels::KernelHyperVar hyper;
};

/// Flattened inducing vector U (H x 1) and its per-layer M x D_l views.
class PosteriorDraw
{
public:
    PosteriorDraw(const ad::Var& flat, const DgpArchitecture& arch);
    /// Builds the flat vector by stacking the column-major entries of each view.
    static PosteriorDraw from_layers(std::vector<ad::Var> views);

    const ad::Var& flat() const { return flat_; }
    const ad::Var& layer(Index l) const { return views_[static_cast<std::size_t>(l)]; }
    Index layers() const { return static_cast<Index>(views_.size()); }

private:
    PosteriorDraw() = default;

    ad::Var flat_;
    std::vector<ad::Var> views_;
};

/// Per-layer column blocks of a flat U in plain values (M x D_l each).
std::vector<Matrix> split_flat(const Vector& flat, const DgpArchitecture& arch);

struct Moments
{
    ad::Var mean;    ///< B x D_l
    ad::Var var;     ///< B x 1, clamped below at variance_floor
    Vector raw_var;  ///< unclamped marginal variances
};

inline constexpr double variance_floor = 1e-12;

/// mean = K_FZ K_ZZ^{-1} U, var_i = k(f_i, f_i) - k_iZ K_ZZ^{-1} k_Zi, given the
/// lower factor of K_ZZ (+ jitter).
Moments conditional_moments(const ad::Var& f_prev, const ad::Var& inducing, const ad::Var& u,
                            const kernels::KernelHyperVar& hyper, const ad::Var& kzz_lower);

/// Same, factoring K_ZZ with kernels::chol_with_jitter.
Moments conditional_moments(const ad::Var& f_prev, const ad::Var& inducing, const ad::Var& u,
                            const kernels::KernelHyperVar& hyper, double jitter = kernels::default_base_jitter);

/// Lower Cholesky factors of K_{Z_l Z_l} + jitter I for every layer.
std::vector<ad::Var> factor_inducing(const std::vector<LayerVars>& layers, double jitter);

struct Propagation
{
    std::vector<ad::Var> samples; ///< F_1 .. F_L, each B x D_l
    const ad::Var& output() const { return samples.back(); }
};

/// F_l = mean + sqrt(var) * eps with fresh eps ~ N(0, 1) per point and output
/// dimension, drawn from `noise`. A null stream forces eps = 0, giving iterated
/// conditional means.
Propagation propagate(const ad::Var& x, const PosteriorDraw& draw, const std::vector<LayerVars>& layers,
                      const std::vector<ad::Var>& kzz_lowers, NormalStream* noise);

Propagation propagate(const ad::Var& x, const PosteriorDraw& draw, const std::vector<LayerVars>& layers,
                      NormalStream* noise, double jitter = kernels::default_base_jitter);

/// sum_l sum_d log N(U_{l,d} | 0, K_{Z_l Z_l}).
ad::Var dgp_prior_logp(const PosteriorDraw& draw, const std::vector<ad::Var>& kzz_lowers);
ad::Var dgp_prior_logp(const PosteriorDraw& draw, const std::vector<LayerVars>& layers,
                       double jitter = kernels::default_base_jitter);

} // namespace ddvi::gp

#endif // DDVI_GPLAYERS_HPP
