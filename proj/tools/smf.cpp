#include <iostream>

#include "splitmeanflow/experiment.hpp"

int main(int argc, char** argv) { return splitmeanflow::run_cli(argc, argv, std::cout, std::cerr); }
