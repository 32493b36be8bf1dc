#include "podyn/cli.hpp"

int main(int argc, char** argv) { return podyn::cli::run(argc, argv); }
