#include <gtest/gtest.h>

#include "cracknex/network.hpp"
#include "test_support.hpp"

namespace cracknex {
namespace {

using testing::random_image;
using V = Var<double>;

EncoderParams<double> encoder(int c, std::uint64_t seed) {
  auto rng = make_rng(seed);
  return EncoderParams<double>::init(c, rng);
}

TEST(Encode, ShapeContractOverRandomSizes) {
  const auto p = encoder(16, 1);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> mult(1, 16);
  for (int i = 0; i < 12; ++i) {
    const int h = 8 * mult(rng), w = 8 * mult(rng);
    const auto f = encode(image_to_var<double>(random_image(h, w, rng)), p);
    EXPECT_EQ(f.channels(), 16);
    EXPECT_EQ(f.height(), h / 8);
    EXPECT_EQ(f.width(), w / 8);
    EXPECT_EQ(f.stride, 8);
    EXPECT_EQ(f.origin_h, h);
    EXPECT_EQ(f.origin_w, w);
    for (auto v : f.grid.value()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Encode, SixtyFourSquareGivesEightByEight) {
  std::mt19937_64 rng(2);
  const auto f = encode(image_to_var<double>(random_image(64, 64, rng)), encoder(16, 2));
  EXPECT_EQ(f.grid.value().shape_string(), Tensor<double>(16, 8, 8).shape_string());
}

TEST(Encode, DeterministicAndRejectsBadSizes) {
  std::mt19937_64 rng(3);
  const auto img = image_to_var<double>(random_image(32, 16, rng));
  const auto p = encoder(8, 3);
  EXPECT_EQ(encode(img, p).grid.value(), encode(img, p).grid.value());
  EXPECT_THROW(encode(image_to_var<double>(random_image(30, 16, rng)), p), std::invalid_argument);
}

TEST(Encode, CircularPaddingIsTranslationEquivariant) {
  std::mt19937_64 rng(4);
  const auto img = random_image(32, 32, rng);
  Image shifted(3, 32, 32);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) shifted(c, y, (x + 8) % 32) = img(c, y, x);
  const auto p = encoder(8, 4);
  const auto a = encode(image_to_var<double>(img), p, PadMode::Circular).grid.value();
  const auto b = encode(image_to_var<double>(shifted), p, PadMode::Circular).grid.value();
  for (int c = 0; c < 8; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) EXPECT_NEAR(b(c, y, (x + 1) % 4), a(c, y, x), 1e-9);
}

TEST(EncodePairs, SharedWeightsAndIsolation) {
  std::mt19937_64 rng(5);
  const auto q = image_to_var<double>(random_image(16, 16, rng));
  const auto qr = image_to_var<double>(random_image(16, 16, rng));
  std::vector<V> supports, refl;
  for (int k = 0; k < 5; ++k) {
    supports.push_back(image_to_var<double>(random_image(16, 16, rng)));
    refl.push_back(image_to_var<double>(random_image(16, 16, rng)));
  }
  supports[2] = q;
  auto rgb_p = encoder(8, 5);
  auto refl_p = encoder(8, 6);
  const ConvEncoder<double> rgb{&rgb_p}, re{&refl_p};
  const auto before = encode_pairs<double>(q, qr, supports, refl, rgb, re);
  ASSERT_EQ(before.support.size(), 5u);
  EXPECT_EQ(before.support[2].grid.value(), before.query.grid.value());
  for (int k = 0; k < 5; ++k)
    EXPECT_EQ(before.support[k].grid.value(), encode(supports[k], rgb_p).grid.value());

  rgb_p.convs[0].weight.mutable_value()[0] += 0.5;
  const auto after = encode_pairs<double>(q, qr, supports, refl, rgb, re);
  EXPECT_NE(after.query.grid.value(), before.query.grid.value());
  EXPECT_NE(after.support[0].grid.value(), before.support[0].grid.value());
  EXPECT_EQ(after.support[2].grid.value(), after.query.grid.value());
  EXPECT_EQ(after.query_reflectance.grid.value(), before.query_reflectance.grid.value());
  for (int k = 0; k < 5; ++k)
    EXPECT_EQ(after.support_reflectance[k].grid.value(), before.support_reflectance[k].grid.value());
}

TEST(EncodePairs, SizeMismatchIsAnError) {
  std::mt19937_64 rng(6);
  const auto q = image_to_var<double>(random_image(16, 16, rng));
  const auto small = image_to_var<double>(random_image(8, 8, rng));
  auto p = encoder(4, 6);
  const ConvEncoder<double> e{&p};
  EXPECT_THROW(encode_pairs<double>(q, small, {}, {}, e, e), std::invalid_argument);
  EXPECT_THROW(encode_pairs<double>(q, q, {small}, {q}, e, e), std::invalid_argument);
  EXPECT_THROW(encode_pairs<double>(q, q, {q}, {}, e, e), std::invalid_argument);
}

FeatureMap<double> feature_map(Tensor<double> t) {
  const int h = t.height(), w = t.width();
  return {V::constant(std::move(t)), 8, 8 * h, 8 * w};
}

TEST(AsppFuse, ShapeContract) {
  std::mt19937_64 rng(7);
  auto arng = make_rng(7);
  const auto p = ASPPParams<double>::init(8, arng);
  const auto f = aspp_fuse(feature_map(testing::random_tensor(8, 8, 8, rng)),
                           feature_map(testing::random_tensor(8, 8, 8, rng)), p);
  EXPECT_EQ(f.channels(), 8);
  EXPECT_EQ(f.height(), 16);
  EXPECT_EQ(f.width(), 16);
  EXPECT_EQ(f.stride, 4);
  EXPECT_EQ(f.origin_h, 64);
  EXPECT_THROW(aspp_fuse(feature_map(Tensor<double>(8, 8, 8)), feature_map(Tensor<double>(8, 4, 4)), p),
               std::invalid_argument);
}

TEST(AsppFuse, ConstantInputsGiveChannelwiseConstantOutput) {
  auto arng = make_rng(8);
  const auto p = ASPPParams<double>::init(4, arng);
  Tensor<double> hi(4, 6, 6), lo(4, 6, 6);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 36; ++i) {
      hi.channel_data(c)[i] = 0.3 * (c + 1);
      lo.channel_data(c)[i] = -0.2 * c;
    }
  // Circular padding keeps every convolution of a constant map constant.
  const auto f = aspp_fuse(feature_map(hi), feature_map(lo), p, PadMode::Circular).grid.value();
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 144; ++i) EXPECT_NEAR(f.channel_data(c)[i], f.channel_data(c)[0], 1e-12);
}

TEST(AsppFuse, ZeroedTrunkLeavesOnlyTheLowLevelPath) {
  auto arng = make_rng(9);
  auto p = ASPPParams<double>::init(4, arng);
  auto zero = [](ConvLayer<double>& l) {
    l.weight.mutable_value().fill(0);
    l.bias.mutable_value().fill(0);
  };
  zero(p.pointwise);
  for (auto& a : p.atrous) zero(a);
  zero(p.pool_proj);
  zero(p.merge);
  p.low_level = ConvLayer<double>::identity(4);

  std::mt19937_64 rng(9);
  const auto lo = testing::random_tensor(4, 4, 4, rng);
  const auto out1 = aspp_fuse(feature_map(testing::random_tensor(4, 4, 4, rng)), feature_map(lo), p);
  const auto out2 = aspp_fuse(feature_map(testing::random_tensor(4, 4, 4, rng)), feature_map(lo), p);
  EXPECT_EQ(out1.grid.value(), out2.grid.value());

  // Oracle: the fusion convs applied to [0; up(relu(F_r))].
  auto detail = ops::resize_bilinear(ops::relu(V::constant(lo)), 8, 8);
  auto cat = ops::concat_channels<double>({V::constant(Tensor<double>(4, 8, 8)), detail});
  const auto expected = p.fuse2(ops::relu(p.fuse1(cat))).value();
  for (std::size_t i = 0; i < expected.size(); ++i)
    EXPECT_NEAR(out1.grid.value()[i], expected[i], 1e-12);
}

TEST(AsppFuse, GradientsMatchFiniteDifferences) {
  auto arng = make_rng(10);
  auto enc = EncoderParams<double>::init(8, arng);
  auto p = ASPPParams<double>::init(8, arng);
  std::mt19937_64 rng(10);
  const auto img = image_to_var<double>(random_image(16, 16, rng));
  const auto probe = V::constant(testing::random_tensor(8, 4, 4, rng));
  auto loss = [&] {
    const auto f = encode(img, enc);
    return ops::sum(ops::mul(aspp_fuse(f, f, p).grid, probe));
  };
  NamedParams<double> named;
  enc.append(named, "enc");
  p.append(named, "aspp");
  // Zero biases put the pooled branch exactly on the ReLU kink.
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  std::vector<V> params;
  for (auto& [n, v] : named) {
    if (n.ends_with("bias") || n.ends_with("beta"))
      for (auto& x : v.mutable_value()) x = u(rng);
    params.push_back(v);
  }
  EXPECT_LT(testing::check_gradients(params, loss), 1e-4);
}

TEST(ProjectUpsample, IdentityInitIsPlainUpsampling) {
  std::mt19937_64 rng(11);
  const auto f = feature_map(testing::random_tensor(3, 4, 5, rng));
  const auto p = ProjectionParams<double>::init(3);
  const auto out = project_upsample(f, p);
  EXPECT_EQ(out.stride, 4);
  const auto up = ops::resize_bilinear(f.grid, 8, 10).value();
  for (std::size_t i = 0; i < up.size(); ++i) EXPECT_NEAR(out.grid.value()[i], up[i], 1e-12);
}

}  // namespace
}  // namespace cracknex
