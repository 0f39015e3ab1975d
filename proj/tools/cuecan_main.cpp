#include "cuecan/cli.hpp"

int main(int argc, char** argv) { return cuecan::cli::run(argc, argv); }
