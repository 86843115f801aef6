#include <iostream>

#include "sparseforge/cli.hpp"

int main(int argc, char** argv) {
  return sparseforge::cli::run(argc, argv, std::cout, std::cerr);
}
