#include "mumloc/cli.hpp"

int main(int argc, char** argv) { return mumloc::cli::run_cli(argc, argv); }
