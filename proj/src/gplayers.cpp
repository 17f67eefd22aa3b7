#include "ddvi/gplayers.hpp"

#include <algorithm>

namespace ddvi::gp
{

std::string to_string(Task task)
{
    return task == Task::regression ? "regression" : "classification";
}

Task task_from_string(const std::string& name)
{
    if (name == "regression")
        return Task::regression;
    if (name == "classification")
        return Task::classification;
    throw ValidationError("unknown task '" + name + "' (expected regression or classification)");
}

DgpArchitecture DgpArchitecture::make(Index input_dim, Index layers, Index num_inducing, Task task,
                                      Index num_classes, Index hidden_cap)
{
    if (layers < 1)
        throw ValidationError(detail::concat("architecture: layers = ", layers, ", need >= 1"));
    DgpArchitecture arch;
    arch.input_dim = input_dim;
    arch.num_inducing = num_inducing;
    arch.task = task;
    arch.num_classes = num_classes;
    const Index hidden = std::min(input_dim, hidden_cap);
    for (Index l = 0; l + 1 < layers; ++l)
        arch.widths.push_back(hidden);
    arch.widths.push_back(task == Task::regression ? 1 : num_classes);
    arch.validate();
    return arch;
}

Index DgpArchitecture::offset(Index layer) const
{
    Index off = 0;
    for (Index l = 0; l < layer; ++l)
        off += widths[static_cast<std::size_t>(l)] * num_inducing;
    return off;
}

Index DgpArchitecture::flat_dim() const
{
    return offset(layers());
}

void DgpArchitecture::validate() const
{
    if (widths.empty())
        throw ValidationError("architecture: at least one layer required");
    if (num_inducing < 1)
        throw ValidationError("architecture: num_inducing must be >= 1");
    if (input_dim < 1)
        throw ValidationError("architecture: input_dim must be >= 1");
    for (const Index w : widths)
        if (w < 1)
            throw ValidationError("architecture: layer widths must be >= 1");
    if (task == Task::regression && widths.back() != 1)
        throw ValidationError("architecture: regression output width must be 1");
    if (task == Task::classification && (num_classes < 2 || widths.back() != num_classes))
        throw ValidationError("architecture: classification output width must equal num_classes >= 2");
}

PosteriorDraw::PosteriorDraw(const ad::Var& flat, const DgpArchitecture& arch) : flat_(flat)
{
    if (flat.rows() != arch.flat_dim() || flat.cols() != 1)
        throw ShapeError(detail::concat("PosteriorDraw: flat vector ", shape_str(flat.value()), " for H = ",
                                        arch.flat_dim()));
    const Index m = arch.num_inducing;
    for (Index l = 0; l < arch.layers(); ++l) {
        const Index d = arch.out_dim(l);
        views_.push_back(ad::reshape(ad::slice(flat, arch.offset(l), 0, m * d, 1), m, d));
    }
}

PosteriorDraw PosteriorDraw::from_layers(std::vector<ad::Var> views)
{
    if (views.empty())
        throw ValidationError("PosteriorDraw: no layers");
    std::vector<ad::Var> columns;
    for (const ad::Var& v : views)
        columns.push_back(ad::reshape(v, v.value().size(), 1));
    PosteriorDraw draw;
    draw.flat_ = ad::concat_rows(columns);
    draw.views_ = std::move(views);
    return draw;
}

std::vector<Matrix> split_flat(const Vector& flat, const DgpArchitecture& arch)
{
    if (flat.size() != arch.flat_dim())
        throw ShapeError(detail::concat("split_flat: length ", flat.size(), " for H = ", arch.flat_dim()));
    std::vector<Matrix> out;
    const Index m = arch.num_inducing;
    for (Index l = 0; l < arch.layers(); ++l)
        out.emplace_back(Eigen::Map<const Matrix>(flat.data() + arch.offset(l), m, arch.out_dim(l)));
    return out;
}

Moments conditional_moments(const ad::Var& f_prev, const ad::Var& inducing, const ad::Var& u,
                            const kernels::KernelHyperVar& hyper, const ad::Var& kzz_lower)
{
    if (u.rows() != inducing.rows() || kzz_lower.rows() != inducing.rows())
        throw ShapeError(detail::concat("conditional_moments: inducing ", shape_str(inducing.value()), ", U ",
                                        shape_str(u.value()), ", factor ", shape_str(kzz_lower.value())));
    const Index batch = f_prev.rows();
    const ad::Var kfz = kernels::rbf_gram(f_prev, inducing, hyper);
    const ad::Var proj = ad::solve_lower(kzz_lower, ad::transpose(kfz)); // M x B
    const ad::Var mean = ad::matmul(ad::transpose(proj), ad::solve_lower(kzz_lower, u));
    const ad::Var prior_var = ad::broadcast(ad::exp(hyper.log_signal_variance), batch, 1);
    const ad::Var raw = prior_var - ad::transpose(ad::sum_cols(ad::square(proj)));
    return {mean, ad::clamp_min(raw, variance_floor), raw.value()};
}

Moments conditional_moments(const ad::Var& f_prev, const ad::Var& inducing, const ad::Var& u,
                            const kernels::KernelHyperVar& hyper, double jitter)
{
    const ad::Var kzz = kernels::rbf_gram(inducing, inducing, hyper);
    return conditional_moments(f_prev, inducing, u, hyper, kernels::chol_with_jitter(kzz, jitter).lower);
}

std::vector<ad::Var> factor_inducing(const std::vector<LayerVars>& layers, double jitter)
{
    std::vector<ad::Var> lowers;
    lowers.reserve(layers.size());
    for (const LayerVars& layer : layers) {
        const ad::Var kzz = kernels::rbf_gram(layer.inducing, layer.inducing, layer.hyper);
        lowers.push_back(kernels::chol_with_jitter(kzz, jitter).lower);
    }
    return lowers;
}

Propagation propagate(const ad::Var& x, const PosteriorDraw& draw, const std::vector<LayerVars>& layers,
                      const std::vector<ad::Var>& kzz_lowers, NormalStream* noise)
{
    if (static_cast<Index>(layers.size()) != draw.layers() || kzz_lowers.size() != layers.size())
        throw ShapeError(detail::concat("propagate: ", layers.size(), " layers, ", draw.layers(), " U blocks, ",
                                        kzz_lowers.size(), " factors"));
    Propagation out;
    ad::Var f = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const ad::Var& u = draw.layer(static_cast<Index>(l));
        if (f.cols() != layers[l].inducing.cols())
            throw ShapeError(detail::concat("propagate: layer ", l + 1, " input ", shape_str(f.value()),
                                            " vs inducing inputs ", shape_str(layers[l].inducing.value())));
        const Moments mom = conditional_moments(f, layers[l].inducing, u, layers[l].hyper, kzz_lowers[l]);
        if (noise == nullptr) {
            f = mom.mean;
        } else {
            const Index b = mom.mean.rows();
            const Index d = mom.mean.cols();
            const ad::Var eps = f.tape().constant(noise->matrix(b, d));
            f = mom.mean + ad::mul(ad::broadcast(ad::sqrt(mom.var), b, d), eps);
        }
        out.samples.push_back(f);
    }
    return out;
}

Propagation propagate(const ad::Var& x, const PosteriorDraw& draw, const std::vector<LayerVars>& layers,
                      NormalStream* noise, double jitter)
{
    return propagate(x, draw, layers, factor_inducing(layers, jitter), noise);
}

ad::Var dgp_prior_logp(const PosteriorDraw& draw, const std::vector<ad::Var>& kzz_lowers)
{
    if (static_cast<Index>(kzz_lowers.size()) != draw.layers())
        throw ShapeError("dgp_prior_logp: factor count does not match layer count");
    ad::Var total = kernels::gaussian_logpdf_zero_mean(draw.layer(0), kzz_lowers[0]);
    for (Index l = 1; l < draw.layers(); ++l)
        total = total + kernels::gaussian_logpdf_zero_mean(draw.layer(l), kzz_lowers[static_cast<std::size_t>(l)]);
    return total;
}

ad::Var dgp_prior_logp(const PosteriorDraw& draw, const std::vector<LayerVars>& layers, double jitter)
{
    return dgp_prior_logp(draw, factor_inducing(layers, jitter));
}

} // namespace ddvi::gp
