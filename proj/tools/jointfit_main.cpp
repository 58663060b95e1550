#include "jointfit/io.hpp"

int main(int argc, char** argv) { return jointfit::run_cli(argc, argv); }
