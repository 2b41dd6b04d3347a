#include "emogen/cli.hpp"

int main(int argc, char** argv) { return emogen::run_cli(argc, argv); }
