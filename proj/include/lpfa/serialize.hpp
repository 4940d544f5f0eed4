#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lpfa/linalg.hpp"

namespace lpfa {

/// FNV-1a 64-bit hash; the integrity check for binary payloads.
std::uint64_t fnv1a(std::span<const std::byte> bytes);

/// Shortest decimal that parses back to exactly v.
std::string shortest(double v);

/// CSV with a header comment carrying grid and shape; values printed as
/// shortest round-trip decimals.
std::string mat_to_csv(const Mat& m);
Mat mat_from_csv(const std::string& text);
void write_mat_csv(const std::filesystem::path& path, const Mat& m);
Mat read_mat_csv(const std::filesystem::path& path);

/// Raw binary matrix: magic "LPFAMAT1", u64 rows, u64 cols, u8 grid tag,
/// little-endian F64 payload.
std::vector<std::byte> mat_to_bytes(const Mat& m);
Mat mat_from_bytes(std::span<const std::byte> bytes);
void write_mat_bin(const std::filesystem::path& path, const Mat& m);
Mat read_mat_bin(const std::filesystem::path& path);

std::vector<std::byte> vec_to_bytes(const Vec& v);
Vec vec_from_bytes(std::span<const std::byte> bytes);

/// Named binary sections with a checksummed index; the on-disk form for
/// tapes and batch logs. Layout: magic "LPFACNT1", u32 version, u32 count,
/// index entries (u32 name length, name bytes, u64 offset, u64 size,
/// u64 fnv1a of the payload), then payloads.
struct Section {
  std::string name;
  std::vector<std::byte> bytes;
};

std::vector<std::byte> container_to_bytes(const std::vector<Section>& sections);
/// Throws std::runtime_error on malformed input or checksum mismatch.
std::vector<Section> container_from_bytes(std::span<const std::byte> bytes);

void write_container(const std::filesystem::path& path,
                     const std::vector<Section>& sections);
std::vector<Section> read_container(const std::filesystem::path& path);

/// nullptr when absent.
const Section* find_section(const std::vector<Section>& sections,
                            const std::string& name);

}  // namespace lpfa
