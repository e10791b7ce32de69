#include "cracknex/cli.hpp"

int main(int argc, char** argv) {
  return cracknex::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
