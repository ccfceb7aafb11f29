#include "rnflnet/cli.hpp"

int main(int argc, char** argv) { return rnfl::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
