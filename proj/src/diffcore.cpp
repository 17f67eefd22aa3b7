#include "ddvi/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ddvi::ad
{

namespace
{

ShapeError shape_error(std::string_view op, const Var& a, const Var& b)
{
    return ShapeError(detail::concat(op, ": incompatible shapes ", shape_str(a.value()), " and ",
                                     shape_str(b.value())));
}

void require_same_shape(std::string_view op, const Var& a, const Var& b)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw shape_error(op, a, b);
}

void require_same_tape(std::string_view op, const Var& a, const Var& b)
{
    if (&a.tape() != &b.tape())
        throw ValidationError(detail::concat(op, ": operands live on different tapes"));
}

// (L^{-T} M L^{-1}) for lower-triangular L.
Matrix sandwich_inverse(const Matrix& lower, const Matrix& m)
{
    const auto l = lower.triangularView<Eigen::Lower>();
    Matrix left = l.transpose().solve(m);                  // L^{-T} M
    Matrix right = l.transpose().solve(left.transpose());  // L^{-T} (L^{-T} M)^T
    return right.transpose();
}

} // namespace

std::string_view op_name(OpKind kind)
{
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::cholesky: return "cholesky";
    case OpKind::solve_lower: return "solve_lower";
    case OpKind::solve_lower_transpose: return "solve_lower_transpose";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::shift: return "shift";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::tanh: return "tanh";
    case OpKind::sqrt: return "sqrt";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::sum_rows: return "sum_rows";
    case OpKind::sum_cols: return "sum_cols";
    case OpKind::broadcast: return "broadcast";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::diag: return "diag";
    case OpKind::tril: return "tril";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::logaddexp: return "logaddexp";
    case OpKind::rbf_gram: return "rbf_gram";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const
{
    return tape_->nodes_[id_].value;
}

const Matrix& Var::grad() const
{
    return tape_->nodes_[id_].grad;
}

double Var::scalar() const
{
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1)
        throw ShapeError(detail::concat("scalar(): node is ", shape_str(v), ", expected 1x1"));
    return v(0, 0);
}

Var Tape::variable(Matrix value)
{
    Node node;
    node.kind = OpKind::leaf;
    node.value = std::move(value);
    node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value)
{
    Node node;
    node.kind = OpKind::constant;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

void Tape::check_owner(const Var& v) const
{
    if (v.tape_ != this || v.id_ >= nodes_.size())
        throw ValidationError("Var does not belong to this tape");
}

Var Tape::record(OpKind kind, Matrix value, std::initializer_list<Var> inputs, BackwardFn backward_fn)
{
    return record(kind, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward_fn));
}

Var Tape::record(OpKind kind, Matrix value, std::span<const Var> inputs, BackwardFn backward_fn)
{
    Node node;
    node.kind = kind;
    node.value = std::move(value);
    node.parents.reserve(inputs.size());
    for (const Var& in : inputs) {
        check_owner(in);
        node.parents.push_back(in.id_);
        node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
    }
    if (node.requires_grad)
        node.backward = std::move(backward_fn);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

void Tape::accumulate(const Var& target, const Matrix& grad)
{
    Node& node = nodes_[target.id_];
    if (!node.requires_grad)
        return;
    if (grad.rows() != node.value.rows() || grad.cols() != node.value.cols())
        throw ShapeError(detail::concat("accumulate: gradient ", shape_str(grad), " for node ",
                                        shape_str(node.value), " (", op_name(node.kind), ")"));
    if (node.grad.size() == 0)
        node.grad = grad;
    else
        node.grad += grad;
}

void Tape::backward(const Var& root)
{
    check_owner(root);
    if (root.rows() != 1 || root.cols() != 1)
        throw ShapeError(detail::concat("backward: root must be 1x1, got ", shape_str(root.value())));
    for (Node& node : nodes_)
        if (node.kind != OpKind::leaf)
            node.grad.resize(0, 0);
    accumulate(root, Matrix::Ones(1, 1));
    for (std::size_t i = root.id_ + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.backward || node.grad.size() == 0)
            continue;
        node.backward(*this, node.value, node.grad);
    }
}

void Tape::zero_grad()
{
    for (Node& node : nodes_)
        node.grad.resize(0, 0);
}

// ---------------------------------------------------------------------------
// Binary and elementwise ops

Var matmul(const Var& a, const Var& b)
{
    require_same_tape("matmul", a, b);
    if (a.cols() != b.rows())
        throw shape_error("matmul", a, b);
    Matrix out = a.value() * b.value();
    return a.tape().record(OpKind::matmul, std::move(out), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
        if (t.requires_grad(a))
            t.accumulate(a, g * b.value().transpose());
        if (t.requires_grad(b))
            t.accumulate(b, a.value().transpose() * g);
    });
}

Var add(const Var& a, const Var& b)
{
    require_same_tape("add", a, b);
    require_same_shape("add", a, b);
    return a.tape().record(OpKind::add, a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(const Var& a, const Var& b)
{
    require_same_tape("sub", a, b);
    require_same_shape("sub", a, b);
    return a.tape().record(OpKind::sub, a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(b))
            t.accumulate(b, -g);
    });
}

Var mul(const Var& a, const Var& b)
{
    require_same_tape("mul", a, b);
    require_same_shape("mul", a, b);
    Matrix out = a.value().cwiseProduct(b.value());
    return a.tape().record(OpKind::mul, std::move(out), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
        if (t.requires_grad(a))
            t.accumulate(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b))
            t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

Var scale(const Var& a, double c)
{
    return a.tape().record(OpKind::scale, a.value() * c, {a},
                           [a, c](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g * c); });
}

Var shift(const Var& a, double c)
{
    Matrix out = a.value().array() + c;
    return a.tape().record(OpKind::shift, std::move(out), {a},
                           [a](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g); });
}

Var neg(const Var& a)
{
    return scale(a, -1.0);
}

Var exp(const Var& a)
{
    Matrix out = a.value().array().exp();
    return a.tape().record(OpKind::exp, std::move(out), {a},
                           [a](Tape& t, const Matrix& out, const Matrix& g) { t.accumulate(a, g.cwiseProduct(out)); });
}

Var log(const Var& a)
{
    Matrix out = a.value().array().log();
    return a.tape().record(OpKind::log, std::move(out), {a}, [a](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, g.cwiseQuotient(a.value()));
    });
}

Var tanh(const Var& a)
{
    Matrix out = a.value().array().tanh();
    return a.tape().record(OpKind::tanh, std::move(out), {a}, [a](Tape& t, const Matrix& out, const Matrix& g) {
        t.accumulate(a, (g.array() * (1.0 - out.array().square())).matrix());
    });
}

Var sqrt(const Var& a)
{
    Matrix out = a.value().array().sqrt();
    return a.tape().record(OpKind::sqrt, std::move(out), {a}, [a](Tape& t, const Matrix& out, const Matrix& g) {
        t.accumulate(a, (0.5 * g.array() / out.array()).matrix());
    });
}

Var square(const Var& a)
{
    Matrix out = a.value().array().square();
    return a.tape().record(OpKind::square, std::move(out), {a}, [a](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, (2.0 * g.array() * a.value().array()).matrix());
    });
}

Var logaddexp(const Var& a, const Var& b)
{
    require_same_tape("logaddexp", a, b);
    require_same_shape("logaddexp", a, b);
    const auto x = a.value().array();
    const auto y = b.value().array();
    const Eigen::ArrayXXd hi = x.max(y);
    Matrix out = (hi + ((x - hi).exp() + (y - hi).exp()).log()).matrix();
    return a.tape().record(OpKind::logaddexp, std::move(out), {a, b}, [a, b](Tape& t, const Matrix& out, const Matrix& g) {
        if (t.requires_grad(a))
            t.accumulate(a, (g.array() * (a.value().array() - out.array()).exp()).matrix());
        if (t.requires_grad(b))
            t.accumulate(b, (g.array() * (b.value().array() - out.array()).exp()).matrix());
    });
}

Var clamp_min(const Var& a, double lo)
{
    Matrix out = a.value().cwiseMax(lo);
    return a.tape().record(OpKind::clamp_min, std::move(out), {a}, [a, lo](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, (a.value().array() > lo).select(g, 0.0).matrix());
    });
}

// ---------------------------------------------------------------------------
// Reductions, broadcasting, structure

Var sum(const Var& a)
{
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    const Index r = a.rows();
    const Index c = a.cols();
    return a.tape().record(OpKind::sum, std::move(out), {a}, [a, r, c](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
    });
}

Var sum_rows(const Var& a)
{
    Matrix out = a.value().rowwise().sum();
    const Index c = a.cols();
    return a.tape().record(OpKind::sum_rows, std::move(out), {a}, [a, c](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, g.replicate(1, c));
    });
}

Var sum_cols(const Var& a)
{
    Matrix out = a.value().colwise().sum();
    const Index r = a.rows();
    return a.tape().record(OpKind::sum_cols, std::move(out), {a}, [a, r](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, g.replicate(r, 1));
    });
}

Var broadcast(const Var& a, Index rows, Index cols)
{
    const Index ar = a.rows();
    const Index ac = a.cols();
    const bool row_ok = ar == rows || ar == 1;
    const bool col_ok = ac == cols || ac == 1;
    if (!row_ok || !col_ok)
        throw ShapeError(detail::concat("broadcast: cannot tile ", shape_str(ar, ac), " to ", shape_str(rows, cols)));
    Matrix out = a.value().replicate(rows / ar, cols / ac);
    return a.tape().record(OpKind::broadcast, std::move(out), {a}, [a, ar, ac](Tape& t, const Matrix&, const Matrix& g) {
        if (ar == g.rows() && ac == g.cols())
            t.accumulate(a, g);
        else if (ar == 1 && ac == 1)
            t.accumulate(a, Matrix::Constant(1, 1, g.sum()));
        else if (ar == 1)
            t.accumulate(a, g.colwise().sum());
        else
            t.accumulate(a, g.rowwise().sum());
    });
}

Var slice(const Var& a, Index row, Index col, Index rows, Index cols)
{
    if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > a.rows() || col + cols > a.cols())
        throw ShapeError(detail::concat("slice: block (", row, ",", col, ") of size ", shape_str(rows, cols),
                                        " exceeds ", shape_str(a.value())));
    Matrix out = a.value().block(row, col, rows, cols);
    const Index ar = a.rows();
    const Index ac = a.cols();
    return a.tape().record(OpKind::slice, std::move(out), {a},
                           [a, row, col, ar, ac](Tape& t, const Matrix&, const Matrix& g) {
                               Matrix full = Matrix::Zero(ar, ac);
                               full.block(row, col, g.rows(), g.cols()) = g;
                               t.accumulate(a, full);
                           });
}

Var concat_rows(std::span<const Var> parts)
{
    if (parts.empty())
        throw ShapeError("concat_rows: no operands");
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols)
            throw shape_error("concat_rows", parts.front(), p);
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Index offset = 0;
    for (const Var& p : parts) {
        out.middleRows(offset, p.rows()) = p.value();
        offset += p.rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts.front().tape().record(OpKind::concat, std::move(out), parts,
                                       [inputs](Tape& t, const Matrix&, const Matrix& g) {
                                           Index off = 0;
                                           for (const Var& p : inputs) {
                                               if (t.requires_grad(p))
                                                   t.accumulate(p, g.middleRows(off, p.rows()));
                                               off += p.rows();
                                           }
                                       });
}

Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty())
        throw ShapeError("concat_cols: no operands");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows)
            throw shape_error("concat_cols", parts.front(), p);
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Index offset = 0;
    for (const Var& p : parts) {
        out.middleCols(offset, p.cols()) = p.value();
        offset += p.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts.front().tape().record(OpKind::concat, std::move(out), parts,
                                       [inputs](Tape& t, const Matrix&, const Matrix& g) {
                                           Index off = 0;
                                           for (const Var& p : inputs) {
                                               if (t.requires_grad(p))
                                                   t.accumulate(p, g.middleCols(off, p.cols()));
                                               off += p.cols();
                                           }
                                       });
}

Var reshape(const Var& a, Index rows, Index cols)
{
    if (rows * cols != a.value().size())
        throw ShapeError(detail::concat("reshape: cannot view ", shape_str(a.value()), " as ", shape_str(rows, cols)));
    Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    const Index ar = a.rows();
    const Index ac = a.cols();
    return a.tape().record(OpKind::reshape, std::move(out), {a}, [a, ar, ac](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, Eigen::Map<const Matrix>(g.data(), ar, ac));
    });
}

Var transpose(const Var& a)
{
    return a.tape().record(OpKind::transpose, a.value().transpose(), {a},
                           [a](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

Var diag(const Var& a)
{
    if (a.rows() != a.cols())
        throw ShapeError(detail::concat("diag: expected square matrix, got ", shape_str(a.value())));
    Matrix out = a.value().diagonal();
    const Index n = a.rows();
    return a.tape().record(OpKind::diag, std::move(out), {a}, [a, n](Tape& t, const Matrix&, const Matrix& g) {
        Matrix full = Matrix::Zero(n, n);
        full.diagonal() = g;
        t.accumulate(a, full);
    });
}

Var tril(const Var& a)
{
    Matrix out = a.value().triangularView<Eigen::Lower>();
    return a.tape().record(OpKind::tril, std::move(out), {a}, [a](Tape& t, const Matrix&, const Matrix& g) {
        t.accumulate(a, Matrix(g.triangularView<Eigen::Lower>()));
    });
}

Var log_softmax(const Var& a)
{
    const Eigen::VectorXd hi = a.value().rowwise().maxCoeff();
    Matrix shifted = a.value().colwise() - hi;
    const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
    Matrix out = shifted.colwise() - lse;
    return a.tape().record(OpKind::log_softmax, std::move(out), {a}, [a](Tape& t, const Matrix& out, const Matrix& g) {
        const Matrix p = out.array().exp();
        const Eigen::VectorXd gs = g.rowwise().sum();
        Matrix ga = g - Matrix(p.array().colwise() * gs.array());
        t.accumulate(a, ga);
    });
}

// ---------------------------------------------------------------------------
// Factorizations

Var cholesky(const Var& a)
{
    if (a.rows() != a.cols())
        throw ShapeError(detail::concat("cholesky: expected square matrix, got ", shape_str(a.value())));
    const Matrix sym = 0.5 * (a.value() + a.value().transpose());
    Eigen::LLT<Matrix> llt(sym);
    if (llt.info() != Eigen::Success)
        throw NumericalError(detail::concat("cholesky: ", shape_str(a.value()), " matrix is not positive definite"));
    Matrix lower = llt.matrixL();
    if (!lower.allFinite())
        throw NumericalError("cholesky: non-finite factor");
    return a.tape().record(OpKind::cholesky, std::move(lower), {a}, [a](Tape& t, const Matrix& l, const Matrix& g) {
        // Phi(L^T G): lower triangle with halved diagonal.
        Matrix phi = (l.transpose() * g).triangularView<Eigen::Lower>();
        phi.diagonal() *= 0.5;
        const Matrix s = sandwich_inverse(l, phi);
        t.accumulate(a, 0.5 * (s + s.transpose()));
    });
}

Var solve_lower(const Var& lower, const Var& b)
{
    require_same_tape("solve_lower", lower, b);
    if (lower.rows() != lower.cols() || lower.cols() != b.rows())
        throw shape_error("solve_lower", lower, b);
    Matrix x = lower.value().triangularView<Eigen::Lower>().solve(b.value());
    return lower.tape().record(OpKind::solve_lower, std::move(x), {lower, b},
                               [lower, b](Tape& t, const Matrix& x, const Matrix& g) {
                                   const Matrix gb =
                                       lower.value().triangularView<Eigen::Lower>().transpose().solve(g);
                                   if (t.requires_grad(b))
                                       t.accumulate(b, gb);
                                   if (t.requires_grad(lower))
                                       t.accumulate(lower, Matrix((-gb * x.transpose()).triangularView<Eigen::Lower>()));
                               });
}

Var solve_lower_transpose(const Var& lower, const Var& b)
{
    require_same_tape("solve_lower_transpose", lower, b);
    if (lower.rows() != lower.cols() || lower.cols() != b.rows())
        throw shape_error("solve_lower_transpose", lower, b);
    Matrix x = lower.value().triangularView<Eigen::Lower>().transpose().solve(b.value());
    return lower.tape().record(OpKind::solve_lower_transpose, std::move(x), {lower, b},
                               [lower, b](Tape& t, const Matrix& x, const Matrix& g) {
                                   const Matrix gb = lower.value().triangularView<Eigen::Lower>().solve(g);
                                   if (t.requires_grad(b))
                                       t.accumulate(b, gb);
                                   if (t.requires_grad(lower))
                                       t.accumulate(lower, Matrix((-x * gb.transpose()).triangularView<Eigen::Lower>()));
                               });
}

// ---------------------------------------------------------------------------
// Finite differences

namespace
{

double evaluate(const ScalarFunction& f, std::span<const Matrix> params)
{
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params)
        vars.push_back(tape.constant(p));
    const double value = f(tape, vars).scalar();
    if (!std::isfinite(value))
        throw NumericalError("grad_check: non-finite function value");
    return value;
}

} // namespace

std::vector<Matrix> gradient(const ScalarFunction& f, std::span<const Matrix> params)
{
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params)
        vars.push_back(tape.variable(p));
    const Var root = f(tape, vars);
    if (!std::isfinite(root.scalar()))
        throw NumericalError("gradient: non-finite function value");
    tape.backward(root);
    std::vector<Matrix> grads;
    grads.reserve(vars.size());
    for (const Var& v : vars)
        grads.push_back(v.grad().size() == 0 ? Matrix::Zero(v.rows(), v.cols()) : v.grad());
    return grads;
}

GradCheckResult grad_check(const ScalarFunction& f, std::span<const Matrix> params, const GradCheckOptions& options)
{
    if (!(options.eps > 0.0))
        throw ValidationError("grad_check: eps must be positive");
    const std::vector<Matrix> analytic = gradient(f, params);

    std::vector<Matrix> work(params.begin(), params.end());
    std::mt19937_64 rng(options.subset_seed);
    GradCheckResult result;
    for (std::size_t p = 0; p < work.size(); ++p) {
        std::vector<Index> coords(static_cast<std::size_t>(work[p].size()));
        std::iota(coords.begin(), coords.end(), Index{0});
        if (options.max_coords_per_param && coords.size() > *options.max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(*options.max_coords_per_param);
        }
        for (const Index k : coords) {
            double& x = work[p].data()[k];
            const double saved = x;
            x = saved + options.eps;
            const double up = evaluate(f, work);
            x = saved - options.eps;
            const double down = evaluate(f, work);
            x = saved;
            const double numeric = (up - down) / (2.0 * options.eps);
            const double ad = analytic[p].data()[k];
            const double rel = std::abs(ad - numeric) / (std::abs(numeric) + 1e-8);
            ++result.coordinates_checked;
            if (rel > result.max_rel_error || result.coordinates_checked == 1) {
                result.max_rel_error = rel;
                result.worst_param = p;
                result.worst_index = k;
                result.autodiff = ad;
                result.numeric = numeric;
            }
        }
    }
    return result;
}

} // namespace ddvi::ad
