#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <fmt/format.h>

#include "otr/tree.hpp"

namespace otr::detail {

inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

/// Points every PrunedLeaf whose sibling is materialized at that sibling.
void link_fallbacks(ObliqueTree& tree);

/// One past the last arena index of the subtree rooted at `id`.
NodeId subtree_end(const ObliqueTree& tree, NodeId id);

/// Appends a copy of src's subtree rooted at `id` to `dst`, renumbering.
NodeId copy_subtree(const ObliqueTree& src, NodeId id, ObliqueTree& dst);

}  // namespace otr::detail
