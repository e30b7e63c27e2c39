#include "cortexbridge/pipeline.hpp"

int main(int argc, char** argv) { return cortexbridge::pipeline::cli_main(argc, argv); }
