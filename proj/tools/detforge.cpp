#include "detforge/cli.hpp"

int main(int argc, char** argv) { return detforge::cli::run(argc, argv); }
