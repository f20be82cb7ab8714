#include <iostream>

#include "pvl/cli.hpp"

int main(int argc, char** argv) {
  return pvl::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
