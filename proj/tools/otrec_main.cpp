#include "otrec/cli.hpp"

int main(int argc, char** argv) { return otrec::cli_main(argc, argv); }
