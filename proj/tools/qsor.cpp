// SPDX-License-Identifier: Apache-2.0
#include "qsor/cli.hpp"

int main(int argc, char** argv) { return qsor::cli::run(argc, argv); }
