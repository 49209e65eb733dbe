#include "recfusion/commands.h"

int main(int argc, char** argv) { return recfusion::run_cli(argc, argv); }
