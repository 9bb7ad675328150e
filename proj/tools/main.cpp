#include "qmri/cli.hpp"

int main(int argc, char** argv) { return qmri::cli::run(argc, argv); }
