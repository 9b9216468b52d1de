#include <filesystem>
#include <fstream>
#include <random>

#include "clusterformer/checkpoint.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace clusterformer;
using cftest::random_tensor;
using cftest::to_vec;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "clusterformer_ckpt_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t u32_at(const std::vector<std::uint8_t>& b, std::size_t pos) {
  return b[pos] | (b[pos + 1] << 8) | (b[pos + 2] << 16) | (static_cast<std::uint32_t>(b[pos + 3]) << 24);
}

}  // namespace

TEST_CASE("checkpoint: header layout is magic, version, count, first array") {
  const Model m = init_params(ModelConfig::tiny(), 1);
  const auto b = serialize_checkpoint(m);
  CHECK(std::string(b.begin(), b.begin() + 4) == "CFK1");
  CHECK(u32_at(b, 4) == kCheckpointVersion);
  CHECK(u32_at(b, 8) == m.named.size());
  const std::string first = m.named[0].first;
  CHECK(u32_at(b, 12) == first.size());
  CHECK(std::string(b.begin() + 16, b.begin() + 16 + static_cast<long>(first.size())) == first);
  const std::size_t p = 16 + first.size();
  CHECK(u32_at(b, p) == 2);
  CHECK(u32_at(b, p + 4) == m.named[0].second.dim(0));
  CHECK(u32_at(b, p + 8) == m.named[0].second.dim(1));
  const float v0 = std::bit_cast<float>(u32_at(b, p + 12));
  CHECK(static_cast<double>(v0) == m.named[0].second.data()[0]);
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
  auto c = ModelConfig::tiny();
  c.seed = 5;
  const Model m = init_params(c, 5);
  const auto p1 = scratch("a.ckpt"), p2 = scratch("b.ckpt");
  save_checkpoint(m, p1.string());
  const Model loaded = load_checkpoint(p1.string());
  save_checkpoint(loaded, p2.string());
  CHECK(read_all(p1) == read_all(p2));
  CHECK(loaded.config == m.config);
  for (std::size_t i = 0; i < m.named.size(); ++i) {
    CHECK(loaded.named[i].first == m.named[i].first);
    CHECK(to_vec(loaded.named[i].second) == to_vec(m.named[i].second));
    CHECK(loaded.named[i].second.requires_grad());
  }
}

TEST_CASE("checkpoint: loaded forward is bitwise equal to original") {
  const Model m = init_params(ModelConfig::tiny(), 6);
  const Model loaded = deserialize_checkpoint(serialize_checkpoint(m));
  std::mt19937_64 rng(6);
  NoGradScope ng;
  for (int i = 0; i < 5; ++i) {
    const Tensor img = random_tensor(rng, {32, 32, 1}, 0, 1);
    for (Precision p : {Precision::kDouble, Precision::kSingle}) {
      PrecisionScope scope(p);
      CHECK(to_vec(model_forward(img, loaded).logits) == to_vec(model_forward(img, m).logits));
    }
  }
}

TEST_CASE("checkpoint: missing array is reported by name") {
  Model m = init_params(ModelConfig::tiny(), 7);
  const std::string dropped = m.named[3].first;
  m.named.erase(m.named.begin() + 3);
  const std::string expect = "missing array '" + dropped + "'";
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(serialize_checkpoint(m)), doctest::Contains(expect.c_str()), FormatError);
}

TEST_CASE("checkpoint: shape mismatch and extra arrays are rejected") {
  Model m = init_params(ModelConfig::tiny(), 8);
  auto& [name, t] = m.named[0];
  t = Tensor::parameter({t.dim(0) + 1, t.dim(1)}, std::vector<double>((t.dim(0) + 1) * t.dim(1), 0.0));
  const std::string expect = "'" + name + "' has shape";
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(serialize_checkpoint(m)), doctest::Contains(expect.c_str()), FormatError);

  Model extra = init_params(ModelConfig::tiny(), 8);
  extra.named.emplace_back("stray", Tensor::parameter({2}, {1, 2}));
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(serialize_checkpoint(extra)), doctest::Contains("unexpected array 'stray'"),
                       FormatError);
}

TEST_CASE("checkpoint: corrupt headers and truncation") {
  const auto good = serialize_checkpoint(init_params(ModelConfig::tiny(), 9));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad_magic), doctest::Contains("magic"), FormatError);
  auto bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad_version), doctest::Contains("version 9"), FormatError);
  auto truncated = good;
  truncated.resize(truncated.size() / 2);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(truncated), doctest::Contains("truncated"), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(trailing), FormatError);
}

TEST_CASE("checkpoint: config mismatch and I/O errors") {
  const auto path = scratch("c.ckpt");
  save_checkpoint(init_params(ModelConfig::tiny(), 10), path.string());
  auto other = ModelConfig::tiny();
  other.T = 2;
  CHECK_THROWS_AS(load_checkpoint(path.string(), other), ConfigError);
  CHECK_NOTHROW(load_checkpoint(path.string(), ModelConfig::tiny()));
  CHECK_THROWS_WITH_AS(load_checkpoint((scratch("nope") / "x.ckpt").string()), doctest::Contains("x.ckpt"), FormatError);
  write_all(scratch("garbage.ckpt"), {1, 2, 3});
  CHECK_THROWS_WITH_AS(load_checkpoint(scratch("garbage.ckpt").string()), doctest::Contains("garbage.ckpt"), FormatError);
}
