#include "flakevol/cli.hpp"

int main(int argc, char** argv) { return flakevol::cli::run(argc, argv); }
