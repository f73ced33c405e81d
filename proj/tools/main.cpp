// SPDX-License-Identifier: Apache-2.0
#include "dora/cli.hpp"

int main(int argc, char** argv) { return dora::run_cli(argc, argv); }
