#include <iostream>
#include <string>
#include <vector>

#include "tempo/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return tempo::run_cli(args, std::cout, std::cerr);
}
