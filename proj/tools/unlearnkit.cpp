#include "unlearnkit/cli.hpp"

int main(int argc, char** argv) { return unlearnkit::run_cli(argc, argv); }
