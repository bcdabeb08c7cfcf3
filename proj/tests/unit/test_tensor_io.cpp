#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "psla/errors.hpp"
#include "psla/tensor_io.hpp"

using namespace psla;

TEST_CASE("header layout is magic, version, dtype, rank, dims") {
  const Tensor t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const auto bytes = io::encode(t);
  REQUIRE(bytes.size() == 4 + 2 + 1 + 1 + 2 * 4 + 6 * 4);
  CHECK(std::memcmp(bytes.data(), "PSLA", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 0);
  CHECK(bytes[7] == 2);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 3);
  // 1.0f little-endian is 00 00 80 3f.
  CHECK(bytes[16] == 0x00);
  CHECK(bytes[18] == 0x80);
  CHECK(bytes[19] == 0x3f);
}

TEST_CASE("round trip is bit-exact, including odd values") {
  std::mt19937_64 rng(1);
  Tensor t = random_normal({3, 5, 7}, 10.0f, rng);
  t[0] = -0.0f;
  t[1] = 1e-42f;  // subnormal
  t[2] = 3.4e38f;
  const Tensor back = io::decode(io::encode(t));
  CHECK(back == t);
  CHECK(std::signbit(back[0]));
}

TEST_CASE("streams and files round trip") {
  std::mt19937_64 rng(2);
  const Tensor t = random_normal({4, 4}, 1.0f, rng);
  std::stringstream s;
  io::write_tensor(s, t);
  CHECK(io::read_tensor(s) == t);
  const auto path = std::filesystem::temp_directory_path() / "psla_io_roundtrip.psla";
  io::save(path, t);
  CHECK(io::load(path) == t);
  std::filesystem::remove(path);
}

TEST_CASE("decode rejects malformed input") {
  const Tensor t({2}, std::vector<float>{1, 2});
  auto bytes = io::encode(t);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(io::decode(bad_magic), IoError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(io::decode(bad_version), IoError);
  auto bad_dtype = bytes;
  bad_dtype[6] = 1;
  CHECK_THROWS_AS(io::decode(bad_dtype), IoError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(io::decode(truncated), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(io::decode(trailing), IoError);
  CHECK_THROWS_AS(io::load("/nonexistent/dir/x.psla"), IoError);
}

TEST_CASE("sha256 of known strings") {
  CHECK(io::sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string abc = "abc";
  CHECK(io::sha256_hex(std::vector<std::uint8_t>(abc.begin(), abc.end())) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
