#include <gtest/gtest.h>

#include <set>

#include "cracknex/engine.hpp"
#include "test_support.hpp"

namespace cracknex {
namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.channels = 8;
  c.image_height = c.image_width = 32;
  c.iterations = 3;
  c.batch_episodes = 2;
  c.eval_episodes = 4;
  return c;
}

Dataset synthetic_set(int n, int size, std::uint64_t seed, SplitTag split = SplitTag::Base) {
  Dataset ds;
  ds.split = split;
  for (int i = 0; i < n; ++i)
    ds.samples.push_back(generate_synthetic_crack(size, size, derive_seed(seed, {std::uint64_t(i)})));
  return ds;
}

template <typename T>
bool same_params(const ModelParams<T>& a, const ModelParams<T>& b) {
  const auto na = a.named(), nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i)
    if (na[i].first != nb[i].first || !(na[i].second.value() == nb[i].second.value())) return false;
  return true;
}

TEST(LearningRate, ScheduleAtBoundaries) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(c, 1999), 1e-3);
  EXPECT_NEAR(learning_rate(c, 2000), 1e-4, 1e-18);
  EXPECT_NEAR(learning_rate(c, 4000), 1e-5, 1e-19);
}

TEST(LearningRate, ClosedFormEverywhere) {
  const TrainConfig c;
  for (long i = 0; i < 6000; ++i)
    ASSERT_NEAR(learning_rate(c, i), 1e-3 * std::pow(0.1, std::floor(i / 2000.0)), 1e-15) << i;
}

TEST(ModelParams, GroupsAndCloning) {
  const auto p = ModelParams<double>::init(8, 1);
  std::set<std::string> groups;
  std::set<std::string> names;
  for (const auto& [name, v] : p.named()) {
    groups.insert(parameter_group(name));
    EXPECT_TRUE(names.insert(name).second) << name;
    EXPECT_TRUE(v.requires_grad());
  }
  EXPECT_EQ(groups, (std::set<std::string>{"rgb_encoder", "reflectance_encoder", "aspp",
                                           "projection", "pfm"}));
  const auto c = p.clone();
  EXPECT_TRUE(same_params(p, c));
  c.named()[0].second.mutable_value()[0] += 1;
  EXPECT_FALSE(same_params(p, c));
  for (const auto& [name, v] : p.frozen().named()) EXPECT_FALSE(v.requires_grad());
  EXPECT_TRUE(same_params(ModelParams<double>::init(8, 1), p));
  EXPECT_FALSE(same_params(ModelParams<double>::init(8, 2), p));
}

TEST(ForwardEpisode, ShapesAndRange) {
  const auto cfg = tiny_config();
  const auto ds = synthetic_set(3, 32, 1);
  const auto params = ModelParams<float>::init(8, 0);
  for (const auto& tg : kAblationRows) {
    auto c = cfg;
    c.toggles = tg;
    const auto fwd = forward_episode(sample_episode(ds, 2, 0), params, c);
    EXPECT_EQ(fwd.prediction.height(), 32);
    EXPECT_EQ(fwd.prediction.width(), 32);
    EXPECT_EQ(fwd.query_fused.stride, 4);
    for (auto v : fwd.prediction.value()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(ForwardEpisode, AllTogglesOffIsTheBarePipeline) {
  auto cfg = tiny_config();
  cfg.toggles = {false, false, false};
  const auto ds = synthetic_set(3, 32, 2);
  const auto ep = sample_episode(ds, 1, 5);
  const auto params = ModelParams<double>::init(8, 3);
  const auto fwd = forward_episode(ep, params, cfg);

  const auto fq = encode(image_to_var<double>(ep.query.image), params.rgb);
  const auto fs = encode(image_to_var<double>(ep.support[0].image), params.rgb);
  const auto fq2 = project_upsample(fq, params.projection);
  const auto p = masked_average_pool(fs, ep.support[0].mask);
  const auto aug = ssp_augment(p, fq2, cfg.ssp);
  const auto expected = match(aug, fq2, 10.0).value();
  EXPECT_EQ(fwd.prediction.value(), expected);
  EXPECT_FALSE(fwd.query_reflectance.has_value());
  EXPECT_FALSE(fwd.fused_reflectance.has_value());
}

TEST(ForwardEpisode, ReflectanceWithoutPfmConcatenates) {
  auto cfg = tiny_config();
  cfg.toggles = {true, false, false};
  const auto ds = synthetic_set(3, 32, 3);
  const auto fwd = forward_episode(sample_episode(ds, 1, 1), ModelParams<double>::init(8, 0), cfg);
  EXPECT_EQ(fwd.prototype.channels(), 16);
  EXPECT_EQ(fwd.query_fused.channels(), 16);
  EXPECT_FALSE(fwd.fused_reflectance.has_value());
}

TEST(ForwardEpisode, FiveIdenticalSupportsEqualOneShot) {
  const auto cfg = tiny_config();
  const auto ds = synthetic_set(2, 32, 4);
  Episode one;
  one.support = {ds.samples[0]};
  one.query = ds.samples[1];
  Episode five = one;
  five.support.assign(5, ds.samples[0]);
  auto params = ModelParams<double>::init(8, 0);
  params.pfm.alpha.mutable_value()[0] = 0.5;
  const auto a = forward_episode(one, params, cfg).prediction.value();
  const auto b = forward_episode(five, params, cfg).prediction.value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(ForwardEpisode, BitReproducible) {
  const auto cfg = tiny_config();
  const auto ds = synthetic_set(4, 32, 5);
  const auto ep = sample_episode(ds, 1, 9);
  const auto a = forward_episode(ep, ModelParams<float>::init(8, 7), cfg).prediction.value();
  const auto b = forward_episode(ep, ModelParams<float>::init(8, 7), cfg).prediction.value();
  EXPECT_EQ(a, b);
}

TEST(Train, ZeroIterationsReturnsInitialisation) {
  auto cfg = tiny_config();
  cfg.iterations = 0;
  const auto cp = train<float>(cfg, synthetic_set(3, 32, 6));
  EXPECT_EQ(cp.iteration, 0u);
  EXPECT_TRUE(same_params(cp.params, ModelParams<float>::init(8, cfg.seed)));
}

TEST(Train, DeterministicAndLogsEveryIteration) {
  const auto cfg = tiny_config();
  const auto ds = synthetic_set(4, 32, 7);
  std::ostringstream log_a, log_b;
  const auto a = train<float>(cfg, ds, &log_a);
  const auto b = train<float>(cfg, ds, &log_b);
  EXPECT_TRUE(same_params(a.params, b.params));
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_EQ(a.iteration, 3u);
  EXPECT_FALSE(same_params(a.params, ModelParams<float>::init(8, cfg.seed)));

  std::istringstream lines(log_a.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    EXPECT_EQ(line.rfind("iter=" + std::to_string(n) + " lr=", 0), 0u) << line;
    for (const char* key : {" loss=", " seg=", " ls=", " lq="})
      EXPECT_NE(line.find(key), std::string::npos) << line;
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST(Train, ResumingMatchesAnUninterruptedRun) {
  auto cfg = tiny_config();
  const auto ds = synthetic_set(4, 32, 8);
  const auto full = train<float>(cfg, ds);
  auto short_cfg = cfg;
  short_cfg.iterations = 1;
  auto partial = train<float>(short_cfg, ds);
  partial.config = cfg;
  const auto resumed = train<float>(cfg, episode_source(ds, cfg), nullptr, partial);
  EXPECT_TRUE(same_params(full.params, resumed.params));
}

TEST(Train, RequiresBaseSplitAndAbortsOnDivergence) {
  auto cfg = tiny_config();
  EXPECT_THROW(train<float>(cfg, synthetic_set(3, 32, 9, SplitTag::Novel)), std::invalid_argument);
  cfg.lr0 = 1e30;
  cfg.iterations = 5;
  try {
    train<float>(cfg, synthetic_set(3, 32, 9));
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.iteration(), 1);
    EXPECT_EQ(e.lr(), 1e30);
  }
}

TEST(Train, SgdMomentumUpdateRule) {
  auto cfg = tiny_config();
  cfg.lr0 = 0.01;
  cfg.momentum = 0.5;
  const auto ds = synthetic_set(3, 32, 10);
  const auto ep = sample_episode(ds, 1, 0);
  Trainer<double> tr(Checkpoint<double>::initial(cfg));
  const auto p0 = tr.checkpoint().params.clone();
  tr.step({ep});
  const auto p1 = tr.checkpoint().params.clone();
  const auto buf1 = tr.checkpoint().momentum;
  tr.step({ep});
  const auto p2 = tr.checkpoint().params.clone();
  const auto buf2 = tr.checkpoint().momentum;

  // Recompute the gradient at p1 independently.
  const auto probe = p1.clone();
  auto terms = episode_loss(forward_episode(ep, probe, cfg), ep, cfg);
  backward(terms.total);
  const auto n0 = p0.named(), n1 = p1.named(), n2 = p2.named(), np = probe.named();
  for (std::size_t i = 0; i < n1.size(); ++i) {
    for (std::size_t j = 0; j < n1[i].second.value().size(); ++j) {
      const double g1 = buf1[i][j];  // first step: buffer is the gradient
      EXPECT_NEAR(n1[i].second.value()[j], n0[i].second.value()[j] - 0.01 * g1, 1e-12);
      const double v2 = 0.5 * g1 + np[i].second.grad()[j];
      EXPECT_NEAR(buf2[i][j], v2, 1e-9);
      EXPECT_NEAR(n2[i].second.value()[j], n1[i].second.value()[j] - 0.01 * v2, 1e-11);
    }
  }
}

TEST(Miou, AccumulatorMatchesBruteForce) {
  std::mt19937_64 rng(11);
  IouCounts acc;
  std::uint64_t fi = 0, fu = 0, bi = 0, bu = 0;
  for (int i = 0; i < 200; ++i) {
    const auto p = testing::random_mask(6, 5, rng), g = testing::random_mask(6, 5, rng);
    miou_accumulate(p, g, acc);
    for (std::size_t j = 0; j < p.size(); ++j) {
      fi += p[j] == 1 && g[j] == 1;
      fu += p[j] == 1 || g[j] == 1;
      bi += p[j] == 0 && g[j] == 0;
      bu += p[j] == 0 || g[j] == 0;
    }
  }
  EXPECT_EQ(acc, (IouCounts{fi, fu, bi, bu}));
}

TEST(Miou, EdgeCases) {
  const Mask fg(1, 4, 4, 1), bg(1, 4, 4, 0);
  IouCounts a;
  miou_accumulate(fg, fg, a);
  EXPECT_EQ(a.fg_intersection, 16u);
  EXPECT_EQ(a.fg_union, 16u);
  EXPECT_DOUBLE_EQ(EvalReport::from_counts(a).miou, 1.0);
  IouCounts b;
  miou_accumulate(fg, bg, b);
  EXPECT_EQ(b.fg_intersection, 0u);
  EXPECT_EQ(b.fg_union, 16u);
  EXPECT_THROW(miou_accumulate(Mask(1, 4, 4, 2), fg, b), std::invalid_argument);
  EXPECT_THROW(miou_accumulate(Mask(1, 4, 3), fg, b), std::invalid_argument);
}

TEST(Miou, ComplementOnBalancedMasksIsZero) {
  Mask g(1, 4, 4), p(1, 4, 4);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = i % 2;
    p[i] = 1 - g[i];
  }
  IouCounts c;
  miou_accumulate(p, g, c);
  const auto r = EvalReport::from_counts(c);
  EXPECT_EQ(r.fg_iou, 0.0);
  EXPECT_EQ(r.bg_iou, 0.0);
  EXPECT_EQ(r.miou, 0.0);
}

TEST(Miou, HandcraftedEpisodesAccumulateOverTheDataset) {
  // Three 2x2 predictions against ground truth, counted by hand:
  //   1: pred {1,0,0,0} gt {1,1,0,0}: fg I=1 U=2, bg I=2 U=3
  //   2: pred {1,1,1,1} gt {0,0,0,1}: fg I=1 U=4, bg I=0 U=3
  //   3: pred {0,0,0,0} gt {0,0,0,0}: fg I=0 U=0, bg I=4 U=4
  const std::array<std::array<unsigned char, 4>, 3> pred{{{1, 0, 0, 0}, {1, 1, 1, 1}, {0, 0, 0, 0}}};
  const std::array<std::array<unsigned char, 4>, 3> gt{{{1, 1, 0, 0}, {0, 0, 0, 1}, {0, 0, 0, 0}}};
  IouCounts acc;
  for (int e = 0; e < 3; ++e) {
    Mask p(1, 2, 2), g(1, 2, 2);
    for (int i = 0; i < 4; ++i) {
      p[i] = pred[e][i];
      g[i] = gt[e][i];
    }
    miou_accumulate(p, g, acc);
  }
  const auto r = EvalReport::from_counts(acc);
  EXPECT_DOUBLE_EQ(r.fg_iou, 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(r.bg_iou, 6.0 / 10.0);
  EXPECT_DOUBLE_EQ(r.miou, (2.0 / 6.0 + 6.0 / 10.0) / 2);
  EXPECT_DOUBLE_EQ(iou(0, 0), 1.0);
}

TEST(Evaluate, DeterministicNonMutatingAndConsistent) {
  const auto cfg = tiny_config();
  const auto cp = Checkpoint<float>::initial(cfg);
  const auto before = cp.params.clone();
  const auto ds = synthetic_set(6, 32, 12, SplitTag::Novel);
  const auto a = evaluate(cp, ds, 1, 5, 3);
  const auto b = evaluate(cp, ds, 1, 5, 3);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
  EXPECT_TRUE(same_params(cp.params, before));
  EXPECT_EQ(a.episode_count, 5);
  EXPECT_EQ(a.K, 1);
  EXPECT_EQ(a.seed, 3u);
  EXPECT_EQ(a.per_episode_ious.size(), 5u);
  EXPECT_DOUBLE_EQ(a.miou, (a.fg_iou + a.bg_iou) / 2);
  EXPECT_NO_THROW(evaluate(cp, ds, 5, 2, 3));
  EXPECT_THROW(evaluate(cp, ds, 1, 0, 3), std::invalid_argument);

  // Oracle: re-run the episodes by hand.
  IouCounts acc;
  for (int e = 0; e < 5; ++e) {
    const auto ep = sample_episode(ds, 1, derive_seed(3, {std::uint64_t(e)}));
    miou_accumulate(predict_episode(ep, cp.params.frozen(), cfg), ep.query.mask, acc);
  }
  EXPECT_DOUBLE_EQ(EvalReport::from_counts(acc).miou, a.miou);
}

TEST(EvalReport, JsonRoundTripUsesFieldNames) {
  EvalReport r;
  r.miou = 0.5;
  r.fg_iou = 0.25;
  r.bg_iou = 0.75;
  r.episode_count = 2;
  r.K = 5;
  r.seed = 9;
  r.per_episode_ious = {0.4, 0.6};
  const nlohmann::json j = r;
  for (const char* key : {"miou", "fg_iou", "bg_iou", "episode_count", "K", "seed", "per_episode_ious"})
    EXPECT_TRUE(j.contains(key)) << key;
  const auto back = j.get<EvalReport>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Ablation, RowsFollowTheComponentTable) {
  ASSERT_EQ(kAblationRows.size(), 4u);
  EXPECT_EQ(kAblationRows[0], (Toggles{false, false, false}));
  EXPECT_EQ(kAblationRows[1], (Toggles{true, false, false}));
  EXPECT_EQ(kAblationRows[2], (Toggles{true, true, false}));
  EXPECT_EQ(kAblationRows[3], (Toggles{true, true, true}));
  EXPECT_EQ(kAblationRows[3], TrainConfig{}.toggles);
}

TEST(Ablation, RunProducesFourRowsWithBothShotSettings) {
  auto cfg = tiny_config();
  cfg.iterations = 1;
  cfg.batch_episodes = 1;
  cfg.eval_episodes = 2;
  const auto rows = run_ablation<float>(cfg, synthetic_set(4, 32, 13),
                                        synthetic_set(7, 32, 14, SplitTag::Novel));
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rows[i].toggles, kAblationRows[i]);
    EXPECT_EQ(rows[i].one_shot.K, 1);
    EXPECT_EQ(rows[i].five_shot.K, 5);
  }
  const auto table = format_ablation_table(rows);
  EXPECT_NE(table.find("1-shot"), std::string::npos);
  EXPECT_NE(table.find("5-shot"), std::string::npos);
  const nlohmann::json j = rows;
  EXPECT_EQ(j.size(), 4u);
  EXPECT_TRUE(j[0].contains("miou_1shot"));
  EXPECT_TRUE(j[0].contains("miou_5shot"));
}

}  // namespace
}  // namespace cracknex
