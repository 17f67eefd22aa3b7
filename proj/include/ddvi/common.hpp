#ifndef DDVI_COMMON_HPP
#define DDVI_COMMON_HPP

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace ddvi
{

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Raised for malformed shapes, configs and inputs. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument
{
public:
    using std::invalid_argument::invalid_argument;
};

/// Operand shapes incompatible with an operation.
class ShapeError : public ValidationError
{
public:
    using ValidationError::ValidationError;
};

/// Non-finite values, failed factorizations and similar. Maps to CLI exit code 2.
class NumericalError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

namespace detail
{
template <typename... Args>
std::string concat(Args&&... args)
{
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}
} // namespace detail

inline std::string shape_str(Index rows, Index cols)
{
    return detail::concat(rows, "x", cols);
}

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m)
{
    return shape_str(m.rows(), m.cols());
}

} // namespace ddvi

#endif // DDVI_COMMON_HPP
