#include "cli.hpp"

int main(int argc, char** argv) { return matekd::cli::run(argc, argv); }
