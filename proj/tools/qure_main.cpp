#include "qure/cli.hpp"

int main(int argc, char** argv) { return qure::cli::dispatch(argc, argv); }
