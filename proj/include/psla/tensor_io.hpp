#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "psla/tensor.hpp"

namespace psla::io {

// Layout: "PSLA" | u16 version | u8 dtype (0 = f32 LE) | u8 rank |
// rank x u32 dims | raw little-endian payload. All integers little-endian.
inline constexpr char kMagic[4] = {'P', 'S', 'L', 'A'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

std::vector<std::uint8_t> encode(const Tensor& tensor);
Tensor decode(const std::vector<std::uint8_t>& bytes);

void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save(const std::filesystem::path& path, const Tensor& tensor);
Tensor load(const std::filesystem::path& path);

// Lowercase hex SHA-256 of a byte buffer / file contents.
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace psla::io
