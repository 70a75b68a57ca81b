#include <iostream>
#include <string>
#include <vector>

#include "tcaf/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return tcaf::cli::dispatch(args, std::cout, std::cerr);
}
