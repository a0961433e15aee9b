#include "affnet/cli.hpp"

int main(int argc, char** argv) { return affnet::run_cli(argc, argv); }
