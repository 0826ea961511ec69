#include "cli.hpp"

int main(int argc, char** argv) { return ditflow::cli::main_entry(argc, argv); }
