#include "onerec/pipeline.hpp"

int main(int argc, char** argv) { return onerec::pipeline::run_cli(argc, argv); }
