#include <iostream>
#include <string>
#include <vector>

#include "vitmae/cli.hpp"

int main(int argc, char** argv) {
  return vitmae::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
