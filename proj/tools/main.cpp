#include <string>
#include <vector>

#include "ssgan/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ssgan::cli_dispatch(args);
}
