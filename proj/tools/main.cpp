#include <string>
#include <vector>

#include "cli.hpp"
#include "rsfm/runtime.hpp"

int main(int argc, char** argv) {
  rsfm::configure_allocator();
  rsfm::configure_floating_point();
  return rsfm::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
