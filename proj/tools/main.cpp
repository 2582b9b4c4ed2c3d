#include <iostream>
#include <string>
#include <vector>

#include "vton/cli.hpp"

int main(int argc, char** argv) {
  return vton::run_command(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
