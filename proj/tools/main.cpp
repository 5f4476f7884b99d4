#include <iostream>
#include <string>
#include <vector>

#include "sparseconv/cli.hpp"

int main(int argc, char** argv) {
    sparseconv::init_logging_from_env();
    return sparseconv::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
