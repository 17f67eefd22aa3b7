#include <iostream>

#include "ddvi/cli.hpp"

int main(int argc, char** argv)
{
    return ddvi::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
