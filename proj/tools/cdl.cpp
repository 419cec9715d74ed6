#include "cli.hpp"

int main(int argc, char** argv) { return cdl::cli::run(argc, argv); }
