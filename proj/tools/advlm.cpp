// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "advlm/cli.hpp"

int main(int argc, char** argv) { return advlm::cli::run(argc, argv, std::cout, std::cerr); }
