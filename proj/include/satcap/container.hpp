#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "satcap/errors.hpp"
#include "satcap/tensor.hpp"

namespace satcap {

// Named-tensor container.
//
//   offset 0   "SATC"  u32 version  u32 entry_count  (zero padded to 64)
//   per entry, header starting on a 64-byte boundary:
//              u32 name_len  name bytes  u8 dtype  u8 rank  u64 extents[rank]
//              zero padding to the next 64-byte boundary, then the payload
//
// Every integer and element is little-endian regardless of host order.
enum class DType : std::uint8_t { u8 = 0, f32 = 1, f64 = 2, u64 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::u8: return 1;
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u64: return 8;
  }
  throw LoadError("container: unknown dtype code " + std::to_string(static_cast<int>(d)));
}

struct ContainerEntry {
  std::string name;
  DType dtype = DType::u8;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  std::size_t numel() const { return numel_of(shape); }
};

namespace container_detail {

inline constexpr char kMagic[4] = {'S', 'A', 'T', 'C'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kAlign = 64;

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(const std::uint8_t* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void pad_to(std::vector<std::uint8_t>& out, std::size_t align) {
  while (out.size() % align != 0) out.push_back(0);
}

}  // namespace container_detail

inline ContainerEntry make_entry(std::string name, Shape shape, std::span<const float> values) {
  ContainerEntry e{std::move(name), DType::f32, std::move(shape), {}};
  if (numel_of(e.shape) != values.size()) throw DimensionError("container: entry '" + e.name + "' shape/value count");
  for (float v : values) container_detail::put_le(e.payload, std::bit_cast<std::uint32_t>(v), 4);
  return e;
}

inline ContainerEntry make_entry(std::string name, Shape shape, std::span<const double> values) {
  ContainerEntry e{std::move(name), DType::f64, std::move(shape), {}};
  if (numel_of(e.shape) != values.size()) throw DimensionError("container: entry '" + e.name + "' shape/value count");
  for (double v : values) container_detail::put_le(e.payload, std::bit_cast<std::uint64_t>(v), 8);
  return e;
}

inline ContainerEntry make_entry(std::string name, std::span<const std::uint64_t> values) {
  ContainerEntry e{std::move(name), DType::u64, {values.size()}, {}};
  for (auto v : values) container_detail::put_le(e.payload, v, 8);
  return e;
}

inline ContainerEntry make_text_entry(std::string name, const std::string& text) {
  return {std::move(name), DType::u8, {text.size()}, std::vector<std::uint8_t>(text.begin(), text.end())};
}

template <class T>
std::vector<T> entry_values(const ContainerEntry& e) {
  std::vector<T> out(e.numel());
  const auto* p = e.payload.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (e.dtype) {
      case DType::u8: out[i] = static_cast<T>(p[i]); break;
      case DType::f32: out[i] = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(container_detail::get_le(p + 4 * i, 4)))); break;
      case DType::f64: out[i] = static_cast<T>(std::bit_cast<double>(container_detail::get_le(p + 8 * i, 8))); break;
      case DType::u64: out[i] = static_cast<T>(container_detail::get_le(p + 8 * i, 8)); break;
    }
  }
  return out;
}

inline std::string entry_text(const ContainerEntry& e) {
  if (e.dtype != DType::u8) throw LoadError("container: entry '" + e.name + "' is not text");
  return std::string(e.payload.begin(), e.payload.end());
}

inline std::vector<std::uint8_t> encode_container(const std::vector<ContainerEntry>& entries) {
  using namespace container_detail;
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kVersion, 4);
  put_le(out, entries.size(), 4);
  for (const auto& e : entries) {
    if (e.shape.size() > 255) throw ContractError("container: rank above 255 for '" + e.name + "'");
    if (e.payload.size() != e.numel() * dtype_size(e.dtype)) {
      throw ContractError("container: payload size of '" + e.name + "' does not match its shape");
    }
    pad_to(out, kAlign);
    put_le(out, e.name.size(), 4);
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put_le(out, d, 8);
    pad_to(out, kAlign);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

inline std::vector<ContainerEntry> decode_container(std::span<const std::uint8_t> bytes) {
  using namespace container_detail;
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const std::string& what) {
    if (pos > bytes.size() || bytes.size() - pos < n) {
      throw TruncationError("container: truncated while reading " + what + " at byte " + std::to_string(pos));
    }
  };
  auto align = [&] { pos = (pos + kAlign - 1) / kAlign * kAlign; };
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw MagicError("container: bad magic, expected SATC");
  pos = 4;
  need(8, "header");
  const auto version = get_le(bytes.data() + pos, 4);
  if (version != kVersion) throw LoadError("container: unsupported version " + std::to_string(version));
  const auto count = get_le(bytes.data() + pos + 4, 4);
  pos += 8;
  std::vector<ContainerEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string where = "entry " + std::to_string(i);
    align();
    need(4, where + " name length");
    const auto name_len = get_le(bytes.data() + pos, 4);
    pos += 4;
    need(name_len + 2, where + " name");
    ContainerEntry e;
    e.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const auto code = bytes[pos++];
    if (code > 3) throw LoadError("container: entry '" + e.name + "' has unknown dtype code " + std::to_string(code));
    e.dtype = static_cast<DType>(code);
    const std::size_t rank = bytes[pos++];
    need(8 * rank, "extents of '" + e.name + "'");
    for (std::size_t r = 0; r < rank; ++r, pos += 8) e.shape.push_back(get_le(bytes.data() + pos, 8));
    align();
    const auto size = e.numel() * dtype_size(e.dtype);
    need(size, "payload of '" + e.name + "'");
    e.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
    entries.push_back(std::move(e));
  }
  if (pos != bytes.size()) throw LoadError("container: " + std::to_string(bytes.size() - pos) + " trailing bytes");
  return entries;
}

inline void write_container(const std::string& path, const std::vector<ContainerEntry>& entries) {
  const auto bytes = encode_container(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("container: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("container: write failed for " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<ContainerEntry> read_container(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_container(bytes);
  } catch (const MagicError& e) {
    throw MagicError(path + ": " + e.what());
  } catch (const TruncationError& e) {
    throw TruncationError(path + ": " + e.what());
  } catch (const LoadError& e) {
    throw LoadError(path + ": " + e.what());
  }
}

inline std::map<std::string, const ContainerEntry*> index_entries(const std::vector<ContainerEntry>& entries) {
  std::map<std::string, const ContainerEntry*> out;
  for (const auto& e : entries) {
    if (!out.emplace(e.name, &e).second) throw LoadError("container: duplicate entry '" + e.name + "'");
  }
  return out;
}

}  // namespace satcap
