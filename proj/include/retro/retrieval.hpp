//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <vector>

namespace retro {

/// Result of a reference lookup against the knowledge base. `short_result`
/// flags that fewer candidates than requested were eligible.
struct RetrievalSet {
  std::vector<int> ids;  // knowledge-base recipe indices, best first
  bool short_result = false;
};

}  // namespace retro
