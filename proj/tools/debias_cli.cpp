#include "debias/experiment.hpp"

int main(int argc, char** argv) { return debias::cli_main(argc, argv); }
