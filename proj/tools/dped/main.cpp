#include "cli.hpp"

int main(int argc, char** argv) { return dped::cli::run({argv + 1, argv + argc}); }
