#include <iostream>

#include "lreid/cli/commands.hpp"

int main(int argc, char** argv) { return lreid::cli::run_cli(argc, argv, std::cout, std::cerr); }
