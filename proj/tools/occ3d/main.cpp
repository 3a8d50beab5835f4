#include "occ3d/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return occ3d::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
