#include "cli.hpp"

int main(int argc, char** argv) { return clca::cli::dispatch(argc, argv); }
