#include <iostream>

#include "psla/cli.hpp"

int main(int argc, char** argv) {
  return psla::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
