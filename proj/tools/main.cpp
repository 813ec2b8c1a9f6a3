#include "cli.hpp"

int main(int argc, char** argv) { return krrst::cli::run(argc, argv); }
