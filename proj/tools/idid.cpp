#include "idid/cli.hpp"

int main(int argc, char** argv) { return idid::cli::run(argc, argv); }
