#include "cpra/cli.hpp"

int main(int argc, char** argv) { return cpra::cli::run(argc, argv); }
