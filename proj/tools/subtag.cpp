#include <iostream>

#include "subtag/cli.hpp"

int main(int argc, char **argv) { return subtag::cli::run_cli(argc, argv, std::cin, std::cout, std::cerr); }
