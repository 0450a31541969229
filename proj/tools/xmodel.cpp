#include <iostream>

#include "xmodel/cli.hpp"

int main(int argc, char** argv) { return xmodel::cli::run_cli(argc, argv, std::cout, std::cerr); }
