#include "cli.hpp"

int main(int argc, char** argv) { return otr::cli::run(argc, argv); }
