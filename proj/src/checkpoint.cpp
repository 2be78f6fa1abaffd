// SPDX-License-Identifier: Apache-2.0
#include "clora/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unordered_map>

#include "clora/errors.hpp"

namespace clora {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t at, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= std::uint64_t(b[at + i]) << (8 * i);
  return v;
}

std::size_t parse_count(std::string_view field, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw FormatError("checkpoint header line " + std::to_string(line) + ": bad number '" +
                      std::string(field) + "'");
  }
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors) {
  std::string header;
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    if (t.name.empty() ||
        std::any_of(t.name.begin(), t.name.end(), [](char c) { return std::isspace((unsigned char)c); })) {
      throw FormatError("checkpoint: invalid tensor name '" + t.name + "'");
    }
    header += t.name + '\t' + std::to_string(t.tensor->rows()) + '\t' +
              std::to_string(t.tensor->cols()) + '\t' + std::to_string(offset) + '\n';
    offset += t.tensor->size() * sizeof(double);
  }
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.reserve(out.size() + offset);
  for (const auto& t : tensors)
    for (double v : t.tensor->data()) put_f64(out, v);
  return out;
}

std::vector<StoredTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const std::size_t prefix = kCheckpointMagic.size() + 4;
  if (bytes.size() < prefix ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError("checkpoint: missing CLORA1 magic");
  }
  const std::size_t hlen = get_le(bytes, kCheckpointMagic.size(), 4);
  if (bytes.size() < prefix + hlen) throw FormatError("checkpoint: truncated header");
  const std::string header(bytes.begin() + prefix, bytes.begin() + prefix + hlen);
  const auto blobs = bytes.subspan(prefix + hlen);

  std::vector<StoredTensor> out;
  std::istringstream lines(header);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t tab; (tab = rest.find('\t')) != std::string_view::npos;) {
      f.push_back(rest.substr(0, tab));
      rest.remove_prefix(tab + 1);
    }
    f.push_back(rest);
    if (f.size() != 4) {
      throw FormatError("checkpoint header line " + std::to_string(lineno) +
                        ": expected 4 fields");
    }
    const std::size_t rows = parse_count(f[1], lineno);
    const std::size_t cols = parse_count(f[2], lineno);
    const std::size_t off = parse_count(f[3], lineno);
    const std::size_t n = rows * cols;
    if (off + n * sizeof(double) > blobs.size()) {
      throw FormatError("checkpoint: tensor '" + std::string(f[0]) + "' extends past end of file");
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i)
      data[i] = std::bit_cast<double>(get_le(blobs, off + i * 8, 8));
    out.push_back({std::string(f[0]), Matrix(rows, cols, std::move(data))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw FormatError("checkpoint: write failed for '" + path.string() + "'");
}

std::vector<StoredTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void restore_bank(AdapterBank& bank, std::span<const StoredTensor> stored,
                  std::string_view prefix) {
  std::unordered_map<std::string, const Matrix*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s.value;
  const auto names = bank.tensors(prefix);
  auto params = bank.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto it = by_name.find(names[i].name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + names[i].name + "'");
    if (it->second->rows() != params[i]->rows() || it->second->cols() != params[i]->cols()) {
      throw FormatError("checkpoint: tensor '" + names[i].name + "' has shape " +
                        it->second->shape() + ", expected " + params[i]->shape());
    }
    *params[i] = *it->second;
  }
}

}  // namespace clora
