#include <string>
#include <vector>

#include "ms2d/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ms2d::dispatch(args);
}
