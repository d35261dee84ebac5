// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "fpt/config.hpp"

namespace fpt {

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Tiny configuration used by quick self checks and tests: 32 px inputs,
/// patch 8, width 16, two layers.
FptConfig tiny_config();

/// Fast invariant checks over every module; a few seconds in total.
std::vector<SelftestResult> run_selftest();

}  // namespace fpt
