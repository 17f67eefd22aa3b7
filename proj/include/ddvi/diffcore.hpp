#ifndef DDVI_DIFFCORE_HPP
#define DDVI_DIFFCORE_HPP

// Define-by-run reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns every node created during one forward pass. Nodes are appended in
// creation order, which is a topological order, so backward() is a single
// reverse sweep. Vectors are n x 1 matrices and scalars are 1 x 1.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ddvi/common.hpp"

namespace ddvi::ad
{

enum class OpKind
{
    leaf,
    constant,
    matmul,
    cholesky,
    solve_lower,
    solve_lower_transpose,
    add,
    sub,
    mul,
    scale,
    shift,
    exp,
    log,
    tanh,
    sqrt,
    square,
    sum,
    sum_rows,
    sum_cols,
    broadcast,
    slice,
    concat,
    reshape,
    transpose,
    diag,
    tril,
    clamp_min,
    log_softmax,
    logaddexp,
    rbf_gram,
};

std::string_view op_name(OpKind kind);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var
{
public:
    Var() = default;

    const Matrix& value() const;
    /// Accumulated gradient, or an empty matrix when none reached this node.
    const Matrix& grad() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    /// Value of a 1x1 node.
    double scalar() const;

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape
{
public:
    /// Propagates the output gradient into the inputs via Tape::accumulate.
    /// Receives the node's own forward value alongside its gradient.
    using BackwardFn = std::function<void(Tape&, const Matrix& out, const Matrix& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf: receives a gradient in backward().
    Var variable(Matrix value);
    Var constant(Matrix value);

    /// Appends an op node. When no input requires a gradient the node is
    /// recorded as a constant and `backward_fn` is dropped.
    Var record(OpKind kind, Matrix value, std::initializer_list<Var> inputs, BackwardFn backward_fn);
    Var record(OpKind kind, Matrix value, std::span<const Var> inputs, BackwardFn backward_fn);

    void accumulate(const Var& target, const Matrix& grad);

    /// Reverse sweep from a 1x1 root. Intermediate gradients are reset first;
    /// leaf gradients accumulate until zero_grad().
    void backward(const Var& root);
    void zero_grad();

    bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
    OpKind kind(const Var& v) const { return nodes_[v.id()].kind; }
    const std::vector<std::size_t>& parents(const Var& v) const { return nodes_[v.id()].parents; }
    std::size_t size() const { return nodes_.size(); }

private:
    friend class Var;

    struct Node
    {
        OpKind kind = OpKind::constant;
        Matrix value;
        Matrix grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };

    void check_owner(const Var& v) const;

    std::vector<Node> nodes_;
};

// Elementwise and linear algebra ops. All throw ShapeError on mismatch.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var shift(const Var& a, double c);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
/// Elementwise log(exp(a) + exp(b)), evaluated stably.
Var logaddexp(const Var& a, const Var& b);
/// Elementwise max(a, lo); the gradient is zero where the floor is active.
Var clamp_min(const Var& a, double lo);

/// Sum of all entries, 1x1.
Var sum(const Var& a);
/// Row sums, rows x 1.
Var sum_rows(const Var& a);
/// Column sums, 1 x cols.
Var sum_cols(const Var& a);
/// Tiles an r x 1 column across `cols` columns, a 1 x c row across `rows`
/// rows, or a 1 x 1 scalar to rows x cols.
Var broadcast(const Var& a, Index rows, Index cols);

Var slice(const Var& a, Index row, Index col, Index rows, Index cols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Column-major reinterpretation of the entries.
Var reshape(const Var& a, Index rows, Index cols);
Var transpose(const Var& a);
/// Main diagonal of a square matrix as n x 1.
Var diag(const Var& a);
/// Lower triangle including the diagonal.
Var tril(const Var& a);
/// Row-wise log-softmax.
Var log_softmax(const Var& a);

/// Lower Cholesky factor of the symmetric part (A + A^T) / 2.
/// Throws NumericalError when the matrix is not positive definite.
Var cholesky(const Var& a);
/// X with L X = B; only the lower triangle of L is read.
Var solve_lower(const Var& lower, const Var& b);
/// X with L^T X = B; only the lower triangle of L is read.
Var solve_lower_transpose(const Var& lower, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return shift(a, c); }
inline Var operator-(const Var& a, double c) { return shift(a, -c); }

// Finite-difference verification.

using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult
{
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    Index worst_index = 0;
    double autodiff = 0.0;
    double numeric = 0.0;
    std::size_t coordinates_checked = 0;
};

struct GradCheckOptions
{
    double eps = 1e-5;
    /// Check a seeded random subset of at most this many coordinates per
    /// parameter; all coordinates when unset.
    std::optional<std::size_t> max_coords_per_param;
    std::uint64_t subset_seed = 0;
};

/// Max over checked coordinates of |autodiff - fd| / (|fd| + 1e-8), with fd the
/// central difference. Throws NumericalError if f is non-finite anywhere.
GradCheckResult grad_check(const ScalarFunction& f, std::span<const Matrix> params,
                           const GradCheckOptions& options = {});

/// Gradient of f at params via one backward pass.
std::vector<Matrix> gradient(const ScalarFunction& f, std::span<const Matrix> params);

} // namespace ddvi::ad

#endif // DDVI_DIFFCORE_HPP
