// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.

#include <string>
#include <vector>

#include "pdsim/cli.hpp"

int main(int argc, char** argv) { return pdsim::cli::run(std::vector<std::string>(argv, argv + argc)); }
