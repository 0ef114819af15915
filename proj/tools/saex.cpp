#include "saex/cli.hpp"

int main(int argc, char** argv) { return saex::cli::run(argc, argv); }
