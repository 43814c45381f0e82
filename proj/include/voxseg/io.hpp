#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/grid.hpp"

namespace voxseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

/// Writes `bytes` to `path` through a temporary file and a rename.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed for " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

template <typename T>
std::string encode_payload(std::span<const T> values) {
  std::string bytes(values.size() * sizeof(T), '\0');
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  return bytes;
}

template <typename T>
std::vector<T> decode_payload(const std::string& bytes, std::size_t expected_count, const fs::path& where) {
  if (bytes.size() != expected_count * sizeof(T))
    throw LengthMismatchError("payload " + where.string() + " holds " + std::to_string(bytes.size()) +
                              " bytes, expected " + std::to_string(expected_count * sizeof(T)));
  std::vector<T> out(expected_count);
  if (expected_count) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

/// The payload lives beside the header: foo.json -> foo.raw.
inline fs::path default_payload_name(const fs::path& header) {
  fs::path p = header.filename();
  p.replace_extension(".raw");
  return p;
}

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32le";
  else return "u8";
}

template <typename T>
void write_grid(const Grid3<T>& grid, const fs::path& header) {
  const fs::path payload = default_payload_name(header);
  const json h = {{"dims", {grid.dims().z, grid.dims().y, grid.dims().x}},
                  {"spacing", {grid.spacing().z, grid.spacing().y, grid.spacing().x}},
                  {"dtype", dtype_name<T>()},
                  {"payload", payload.string()}};
  write_file_atomic(header.parent_path() / payload, encode_payload<T>(grid.data()));
  write_json_file(header, h);
}

template <typename T>
Grid3<T> read_grid(const fs::path& header) {
  if (!fs::exists(header)) throw MissingFileError("header not found: " + header.string());
  const json h = read_json_file(header);
  Extent3 dims;
  Spacing3 spacing;
  std::string dtype, payload;
  try {
    const auto d = h.at("dims");
    const auto s = h.at("spacing");
    if (d.size() != 3 || s.size() != 3) throw FormatError("dims and spacing must have 3 entries");
    dims = {d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()};
    spacing = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
    dtype = h.at("dtype").get<std::string>();
    payload = h.at("payload").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("bad header " + header.string() + ": " + e.what());
  }
  if (dtype != dtype_name<T>())
    throw UnsupportedDtypeError("dtype '" + dtype + "' in " + header.string() + ", expected " + dtype_name<T>());
  if (!spacing.valid()) throw FormatError("non-positive spacing in " + header.string());
  const fs::path payload_path = header.parent_path() / payload;
  if (!fs::exists(payload_path)) throw MissingFileError("payload not found: " + payload_path.string());
  auto data = decode_payload<T>(read_file(payload_path), dims.voxel_count(), payload_path);
  Grid3<T> grid(dims, spacing, std::move(data));
  if constexpr (std::is_same_v<T, float>) {
    if (!all_finite(grid)) throw NonFiniteError("non-finite intensity in " + payload_path.string());
  } else {
    if (!is_binary(grid)) throw FormatError("mask value other than 0/1 in " + payload_path.string());
  }
  return grid;
}

}  // namespace detail

/// Header JSON at `header`, raw f32le payload beside it.
inline void write_volume(const Volume3& volume, const fs::path& header) {
  if (!all_finite(volume)) throw NonFiniteError("refusing to write non-finite volume");
  detail::write_grid(volume, header);
}
inline Volume3 read_volume(const fs::path& header) { return detail::read_grid<float>(header); }

inline void write_mask(const BinaryMask3& mask, const fs::path& header) {
  if (!is_binary(mask)) throw FormatError("refusing to write non-binary mask");
  detail::write_grid(mask, header);
}
inline BinaryMask3 read_mask(const fs::path& header) { return detail::read_grid<std::uint8_t>(header); }

}  // namespace voxseg
