#include "trgrpo/cli.hpp"

int main(int argc, char** argv) { return trgrpo::run_cli(argc, argv); }
