#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rff/core/io.hpp"
#include "rff/nn/checkpoint.hpp"

using namespace rff;
using nn::TensorF;

namespace {
std::filesystem::path tmp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}
}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(123);
  std::vector<std::pair<std::string, TensorF>> named;
  named.emplace_back("alpha", TensorF::randn({3, 4}, rng));
  named.emplace_back("beta.weight", TensorF::randn({2, 2, 3, 3}, rng));
  named.emplace_back("gamma", TensorF::from({1}, {-0.0f}));

  auto p = tmp_path("rff_ckpt_roundtrip.ftck");
  nn::save_checkpoint(p, named);
  auto loaded = nn::load_checkpoint<float>(p);

  REQUIRE(loaded.size() == named.size());
  for (size_t i = 0; i < named.size(); ++i) {
    CHECK(loaded[i].first == named[i].first);
    CHECK(loaded[i].second.shape() == named[i].second.shape());
    CHECK(std::memcmp(loaded[i].second.data(), named[i].second.data(),
                      sizeof(float) * static_cast<size_t>(named[i].second.size())) == 0);
  }

  // save again and compare files byte for byte
  auto p2 = tmp_path("rff_ckpt_roundtrip2.ftck");
  nn::save_checkpoint(p2, loaded);
  CHECK(read_text_file(p) == read_text_file(p2));
  std::filesystem::remove(p);
  std::filesystem::remove(p2);
}

TEST_CASE("checkpoint header starts with magic FTCK") {
  auto p = tmp_path("rff_ckpt_magic.ftck");
  nn::save_checkpoint<float>(p, {{"t", TensorF::zeros({2})}});
  std::ifstream is(p, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  CHECK(std::string(magic, 4) == "FTCK");
  std::filesystem::remove(p);
}

TEST_CASE("checkpoint rejects wrong magic and dtype mismatch") {
  auto p = tmp_path("rff_ckpt_bad.ftck");
  write_text_file(p, "NOPE....");
  CHECK_THROWS_AS(nn::load_checkpoint<float>(p), DataError);

  nn::save_checkpoint<float>(p, {{"t", TensorF::zeros({2})}});
  CHECK_THROWS_AS(nn::load_checkpoint<double>(p), DataError);
  std::filesystem::remove(p);
}
