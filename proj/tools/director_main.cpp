#include "director/experiment.hpp"

int main(int argc, char** argv) { return director::run_cli(argc, argv); }
