#include <peg/cli.hpp>

int main(int argc, char** argv) { return peg::cli::dispatch(argc, argv); }
