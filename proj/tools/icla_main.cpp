#include <iostream>

#include "icla/cli.hpp"

int main(int argc, char** argv) { return icla::run_cli(argc, argv, std::cout, std::cerr); }
