#include <iostream>
#include <string>
#include <vector>

#include "pforge_cli/commands.hpp"

int main(int argc, char** argv) {
  pforge::cli::setup_logging();
  return pforge::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
