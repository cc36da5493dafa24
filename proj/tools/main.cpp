#include "cli.hpp"

int main(int argc, char** argv) { return dequant::cli::run(argc, argv); }
