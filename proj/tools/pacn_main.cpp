#include <iostream>
#include <string>
#include <vector>

#include "pacn/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pacn::run(args, std::cout, std::cerr);
}
