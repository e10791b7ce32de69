#include <gtest/gtest.h>

#include <fstream>

#include "cracknex/checkpoint.hpp"
#include "test_support.hpp"

namespace cracknex {
namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.channels = 8;
  c.image_height = c.image_width = 32;
  c.iterations = 2;
  c.batch_episodes = 1;
  c.seed = 5;
  return c;
}

Dataset tiny_set(int n, SplitTag split) {
  Dataset ds;
  ds.split = split;
  for (int i = 0; i < n; ++i)
    ds.samples.push_back(generate_synthetic_crack(32, 32, 100 + static_cast<std::uint64_t>(i)));
  return ds;
}

Checkpoint<float> trained() { return train<float>(tiny_config(), tiny_set(3, SplitTag::Base)); }

std::vector<char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Checkpoint, SaveLoadRoundTripsBitExactly) {
  const auto cp = trained();
  const auto dir = testing::scratch_dir("ckpt_roundtrip");
  save_checkpoint(cp, dir / "a.ckpt");
  const auto back = load_checkpoint<float>(dir / "a.ckpt");
  EXPECT_EQ(back.iteration, cp.iteration);
  EXPECT_EQ(to_config_text(back.config), to_config_text(cp.config));
  const auto a = cp.params.named(), b = back.params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(std::memcmp(a[i].second.value().data(), b[i].second.value().data(),
                          a[i].second.value().size() * sizeof(float)),
              0)
        << a[i].first;
  }
  ASSERT_EQ(back.momentum.size(), cp.momentum.size());
  for (std::size_t i = 0; i < cp.momentum.size(); ++i) EXPECT_EQ(back.momentum[i], cp.momentum[i]);

  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(read_all(dir / "a.ckpt"), read_all(dir / "b.ckpt"));
  const auto bytes = read_all(dir / "a.ckpt");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CRACKNEX");
}

TEST(Checkpoint, EvaluationIsUnchangedByRoundTrip) {
  const auto cp = trained();
  const auto back = deserialize_checkpoint<float>(serialize_checkpoint(cp));
  const auto test = tiny_set(4, SplitTag::Novel);
  EXPECT_EQ(nlohmann::json(evaluate(cp, test, 1, 3, 7)).dump(),
            nlohmann::json(evaluate(back, test, 1, 3, 7)).dump());
}

TEST(Checkpoint, FreshCheckpointHasNoMomentum) {
  const auto cp = Checkpoint<double>::initial(tiny_config());
  const auto back = deserialize_checkpoint<double>(serialize_checkpoint(cp));
  EXPECT_TRUE(back.momentum.empty());
  EXPECT_EQ(back.iteration, 0u);
}

TEST(Checkpoint, TruncationAndCorruptionAreDetected) {
  const auto bytes = serialize_checkpoint(trained());
  for (std::size_t keep : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2,
                           bytes.size() - 1}) {
    std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    EXPECT_THROW(deserialize_checkpoint<float>(cut), CheckpointError) << keep;
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint<float>(flipped), CheckpointError);
}

TEST(Checkpoint, VersionAndPrecisionAreChecked) {
  auto bytes = serialize_checkpoint(trained());
  bytes[8] = 2;  // format_version
  try {
    deserialize_checkpoint<float>(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version"), std::string::npos);
  }
  const auto good = serialize_checkpoint(trained());
  EXPECT_THROW(deserialize_checkpoint<double>(good), CheckpointError);
}

TEST(Checkpoint, MissingFileIsAnError) {
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/dir/x.ckpt"), CheckpointError);
  EXPECT_THROW(save_checkpoint(Checkpoint<float>::initial(tiny_config()), "/nonexistent/dir/x.ckpt"),
               CheckpointError);
}

}  // namespace
}  // namespace cracknex
