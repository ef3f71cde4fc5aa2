#include "pgmfuse/cli.hpp"

int main(int argc, char** argv) { return pgmfuse::cli::run(argc, argv); }
