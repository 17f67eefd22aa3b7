#ifndef DDVI_CLI_HPP
#define DDVI_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace ddvi::cli
{

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 1;
inline constexpr int exit_numerical = 2;

/// Entry point for `ddvi <command> [flags]`. `args` excludes the program name.
/// Returns 0 on success, 1 on invalid input, 2 on a numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace ddvi::cli

#endif // DDVI_CLI_HPP
