#include <gtest/gtest.h>

#include <fstream>

#include "cracknex/config.hpp"
#include "test_support.hpp"

namespace cracknex {
namespace {

TEST(Config, DefaultsFollowTheTrainingSchedule) {
  const TrainConfig c;
  EXPECT_EQ(c.iterations, 6000);
  EXPECT_EQ(c.batch_episodes, 4);
  EXPECT_DOUBLE_EQ(c.lr0, 1e-3);
  EXPECT_DOUBLE_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.decay_every, 2000);
  EXPECT_DOUBLE_EQ(c.decay_factor, 0.1);
  EXPECT_DOUBLE_EQ(c.weights.lambda1, 1.0);
  EXPECT_DOUBLE_EQ(c.weights.lambda2, 0.2);
  EXPECT_DOUBLE_EQ(c.temperature, 10.0);
  EXPECT_DOUBLE_EQ(c.ssp.tau_fg, 0.7);
  EXPECT_DOUBLE_EQ(c.ssp.tau_bg, 0.6);
  EXPECT_DOUBLE_EQ(c.ssp.blend, 0.5);
  EXPECT_EQ(c.toggles, (Toggles{true, true, true}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, EmptyTextKeepsDefaults) {
  const auto c = parse_config("");
  EXPECT_EQ(to_config_text(c), to_config_text(TrainConfig{}));
}

TEST(Config, ParsesEveryKindOfField) {
  const auto c = parse_config(R"(
# comment
[train]
iterations = 12   ; trailing comment
lr0 = 0.05
augment_hflip = false
seed = 18446744073709551615
use_pfm = off
tau_fg = 0.8
padding = circular
image_height = 64
)");
  EXPECT_EQ(c.iterations, 12);
  EXPECT_DOUBLE_EQ(c.lr0, 0.05);
  EXPECT_FALSE(c.augment_hflip);
  EXPECT_EQ(c.seed, 18446744073709551615ull);
  EXPECT_FALSE(c.toggles.use_pfm);
  EXPECT_DOUBLE_EQ(c.ssp.tau_fg, 0.8);
  EXPECT_EQ(c.padding, PadMode::Circular);
  EXPECT_EQ(c.image_height, 64);
}

TEST(Config, TextRoundTripIsExact) {
  TrainConfig c;
  c.lr0 = 0.1 + 0.2;
  c.temperature = 1.0 / 3.0;
  c.seed = 123456789012345ull;
  c.toggles.use_aspp = false;
  c.padding = PadMode::Reflect;
  c.retinex_sigma = 2.5;
  const auto back = parse_config(to_config_text(c));
  EXPECT_EQ(to_config_text(back), to_config_text(c));
  EXPECT_EQ(back.lr0, c.lr0);
  EXPECT_EQ(back.temperature, c.temperature);
}

TEST(Config, RejectsUnknownDuplicateAndMalformedInput) {
  EXPECT_THROW(parse_config("nonsense = 1"), ConfigError);
  EXPECT_THROW(parse_config("lr0 = 1\nlr0 = 2"), ConfigError);
  EXPECT_THROW(parse_config("lr0"), ConfigError);
  EXPECT_THROW(parse_config("lr0 = fast"), ConfigError);
  EXPECT_THROW(parse_config("iterations = 1.5"), ConfigError);
  EXPECT_THROW(parse_config("use_pfm = maybe"), ConfigError);
  EXPECT_THROW(parse_config("padding = mirror"), ConfigError);
  EXPECT_THROW(parse_config("[a]\n[b]"), ConfigError);
  EXPECT_THROW(parse_config("[a"), ConfigError);
}

TEST(Config, ValidationRejectsOutOfRangeValues) {
  EXPECT_THROW(parse_config("decay_factor = 1.5"), ConfigError);
  EXPECT_THROW(parse_config("lr0 = 0"), ConfigError);
  EXPECT_THROW(parse_config("image_height = 100"), ConfigError);
  EXPECT_THROW(parse_config("tau_fg = 1"), ConfigError);
  EXPECT_THROW(parse_config("lambda2 = -1"), ConfigError);
  EXPECT_THROW(parse_config("batch_episodes = 0"), ConfigError);
  EXPECT_THROW(parse_config("momentum = 1"), ConfigError);
}

TEST(Config, SmoothingSigma) {
  TrainConfig c;
  c.image_height = 64;
  c.image_width = 128;
  EXPECT_DOUBLE_EQ(c.smoothing_sigma(), 4.0);
  c.retinex_sigma = 1.5;
  EXPECT_DOUBLE_EQ(c.smoothing_sigma(), 1.5);
}

TEST(Config, LoadFromFile) {
  const auto dir = testing::scratch_dir("config_file");
  {
    std::ofstream out(dir / "c.ini");
    out << "channels = 8\nshots = 5\n";
  }
  const auto c = load_config((dir / "c.ini").string());
  EXPECT_EQ(c.channels, 8);
  EXPECT_EQ(c.shots, 5);
  EXPECT_THROW(load_config((dir / "missing.ini").string()), ConfigError);
}

}  // namespace
}  // namespace cracknex
