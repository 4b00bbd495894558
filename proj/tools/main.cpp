#include "nrsfm/cli.h"

int main(int argc, char** argv) { return nrsfm::cli::run(argc, argv); }
