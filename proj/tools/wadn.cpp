#include "wadn/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return wadn::cli_main(argc, argv, std::cout, std::cerr); }
