#include "scitune/cli.hpp"

int main(int argc, char** argv) { return scitune::dispatch(argc, argv); }
