#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "coseg/tensor_io.hpp"
#include "oracles.hpp"

using coseg::AnyTensor;
using coseg::DType;
using coseg::Rng;
using coseg::Tensor;
using coseg::TensorF;

namespace {

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("tensor round trips preserve every bit") {
  Rng rng(41);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);

  Tensor d = oracle::random_tensor<double>({2, 3, 4}, rng, -100, 100);
  coseg::write_tensor(ss, d);
  TensorF f = oracle::random_tensor<float>({5}, rng, -1, 1);
  coseg::write_tensor(ss, f);
  std::vector<uint8_t> u{0, 1, 127, 255};
  coseg::write_tensor_u8(ss, {2, 2}, u);

  AnyTensor rd = coseg::read_tensor(ss);
  CHECK(rd.dtype == DType::f64);
  CHECK(rd.shape == std::vector<int>{2, 3, 4});
  CHECK(rd.f64 == d.values());

  AnyTensor rf = coseg::read_tensor(ss);
  CHECK(rf.dtype == DType::f32);
  CHECK(rf.f32 == f.values());

  AnyTensor ru = coseg::read_tensor(ss);
  CHECK(ru.dtype == DType::u8);
  CHECK(ru.shape == std::vector<int>{2, 2});
  CHECK(ru.u8 == u);
}

TEST_CASE("on-disk layout is fixed little-endian") {
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  coseg::write_tensor(ss, TensorF::from_data({1}, {1.0f}));
  const std::string raw = ss.str();
  REQUIRE(raw.size() == 4 + 1 + 1 + 4 + 4);
  CHECK(raw.substr(0, 4) == "CSTN");
  CHECK(raw[4] == 0);  // dtype f32
  CHECK(raw[5] == 1);  // rank
  CHECK(static_cast<unsigned char>(raw[6]) == 1);  // dim 0, LE
  CHECK(raw[7] == 0);
  // 1.0f = 0x3f800000 stored little-endian
  CHECK(static_cast<unsigned char>(raw[10]) == 0x00);
  CHECK(static_cast<unsigned char>(raw[11]) == 0x00);
  CHECK(static_cast<unsigned char>(raw[12]) == 0x80);
  CHECK(static_cast<unsigned char>(raw[13]) == 0x3f);
}

TEST_CASE("corrupt streams are rejected") {
  std::stringstream ok(std::ios::in | std::ios::out | std::ios::binary);
  coseg::write_tensor(ok, Tensor::from_data({3}, {1, 2, 3}));
  const std::string raw = ok.str();

  {
    std::stringstream bad(raw.substr(0, raw.size() - 5), std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(coseg::read_tensor(bad), coseg::DataError);
  }
  {
    std::string fl = raw;
    fl[0] = 'X';
    std::stringstream bad(fl, std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(coseg::read_tensor(bad), coseg::DataError);
  }
  {
    std::string fl = raw;
    fl[4] = 9;  // unknown dtype
    std::stringstream bad(fl, std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(coseg::read_tensor(bad), coseg::DataError);
  }
}

TEST_CASE("archive keeps insertion order and round trips") {
  Rng rng(42);
  coseg::TensorArchive ar;
  ar.add("alpha.w", oracle::random_tensor<float>({3, 2}, rng, -1, 1));
  ar.add("beta.b", oracle::random_tensor<double>({4}, rng, -1, 1));
  ar.add("zz", oracle::random_tensor<float>({1}, rng, -1, 1));

  const std::string path = tmp_path("coseg_test_archive.csar");
  ar.save(path);
  coseg::TensorArchive back = coseg::TensorArchive::load(path);

  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[0].first == "alpha.w");
  CHECK(back.entries[1].first == "beta.b");
  CHECK(back.entries[2].first == "zz");
  CHECK(back.at("alpha.w").f32 == ar.at("alpha.w").f32);
  CHECK(back.at("beta.b").f64 == ar.at("beta.b").f64);
  CHECK(back.find("missing") == nullptr);
  CHECK_THROWS_AS(back.at("missing"), coseg::DataError);
  std::remove(path.c_str());
}

TEST_CASE("archive magic and truncation checks") {
  coseg::TensorArchive ar;
  ar.add("t", Tensor::from_data({2}, {1, 2}));
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  ar.write(ss);
  const std::string raw = ss.str();
  CHECK(raw.substr(0, 4) == "CSAR");

  std::stringstream trunc(raw.substr(0, raw.size() / 2), std::ios::in | std::ios::binary);
  CHECK_THROWS_AS(coseg::TensorArchive::read(trunc), coseg::DataError);

  std::string fl = raw;
  fl[1] = '?';
  std::stringstream bad(fl, std::ios::in | std::ios::binary);
  CHECK_THROWS_AS(coseg::TensorArchive::read(bad), coseg::DataError);
}

TEST_CASE("saving twice produces identical bytes") {
  Rng rng(43);
  coseg::TensorArchive ar;
  ar.add("w", oracle::random_tensor<float>({4, 4}, rng, -1, 1));
  std::stringstream a(std::ios::in | std::ios::out | std::ios::binary);
  std::stringstream b(std::ios::in | std::ios::out | std::ios::binary);
  ar.write(a);
  ar.write(b);
  CHECK(a.str() == b.str());
}
