#include <iostream>

#include "ndbench/cli.hpp"

int main(int argc, char** argv) { return ndbench::run_cli(argc, argv, std::cout, std::cerr); }
