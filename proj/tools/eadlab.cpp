#include "eadlab/cli.hpp"

int main(int argc, char** argv) { return eadlab::cli::run_cli(argc, argv); }
