#include "metafew/cli.hpp"

int main(int argc, char** argv) { return metafew::run(argc, argv); }
