// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clora/adapters.hpp"
#include "clora/matrix.hpp"

namespace clora {

// CLORA1 layout:
//
//   bytes 0..5   ASCII magic "CLORA1"
//   bytes 6..9   header length H, uint32 little-endian
//   next H bytes UTF-8 header, one line per tensor:
//                  <name> '\t' <rows> '\t' <cols> '\t' <offset> '\n'
//                offset is relative to the first blob byte
//   remainder    row-major IEEE-754 binary64 values, little-endian,
//                tensors concatenated in header order
//
// Names may not contain whitespace. Backbone tensors use the prefix
// "vit/", adapter banks "adapter/".

inline constexpr std::string_view kCheckpointMagic = "CLORA1";

struct StoredTensor {
  std::string name;
  Matrix value;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors);
std::vector<StoredTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<StoredTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `bank` by name. Every bank tensor must be
/// present with a matching shape.
void restore_bank(AdapterBank& bank, std::span<const StoredTensor> stored,
                  std::string_view prefix = "adapter/");

}  // namespace clora
