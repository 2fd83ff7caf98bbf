#include "cli.hpp"

int main(int argc, char** argv) { return dtsst::cli::dispatch(argc, argv); }
