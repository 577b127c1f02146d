#include <iostream>

#include "modality/cli.hpp"

int main(int argc, char** argv) { return modality::cli::run_cli(argc, argv, std::cout, std::cerr); }
