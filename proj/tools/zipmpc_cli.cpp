#include <iostream>

#include "zipmpc/cli.hpp"

int main(int argc, char** argv) {
  return zipmpc::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
