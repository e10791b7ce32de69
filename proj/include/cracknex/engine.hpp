#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cracknex/config.hpp"
#include "cracknex/data.hpp"
#include "cracknex/losses.hpp"
#include "cracknex/network.hpp"
#include "cracknex/protonet.hpp"
#include "cracknex/retinex.hpp"

namespace cracknex {

/// Every trainable tensor of the model.
template <typename T>
struct ModelParams {
  int channels = 0;
  EncoderParams<T> rgb;
  EncoderParams<T> reflectance;
  ASPPParams<T> aspp;
  ProjectionParams<T> projection;
  PFMParams<T> pfm;

  static ModelParams init(int channels, std::uint64_t seed) {
    auto rng = make_rng(derive_seed(seed, {0x1A17}));
    ModelParams p;
    p.channels = channels;
    p.rgb = EncoderParams<T>::init(channels, rng);
    p.reflectance = EncoderParams<T>::init(channels, rng);
    p.aspp = ASPPParams<T>::init(channels, rng);
    p.projection = ProjectionParams<T>::init(channels);
    p.pfm = PFMParams<T>::init(channels, rng);
    return p;
  }

  /// Parameter table in serialisation order. Names are `<group>.<layer>...`.
  NamedParams<T> named() const {
    NamedParams<T> out;
    rgb.append(out, "rgb_encoder");
    reflectance.append(out, "reflectance_encoder");
    aspp.append(out, "aspp");
    projection.append(out, "projection");
    pfm.append(out, "pfm");
    return out;
  }

  /// Independent deep copy with fresh parameter leaves.
  ModelParams clone() const {
    ModelParams out = init(channels, 0);
    auto dst = out.named();
    auto src = named();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
    return out;
  }

  /// Deep copy whose tensors take no part in gradient bookkeeping.
  ModelParams frozen() const {
    ModelParams out = clone();
    for (auto& [name, v] : out.named()) v.set_requires_grad(false);
    return out;
  }
};

/// The parameter group of a named parameter: the prefix before the first dot.
inline std::string parameter_group(const std::string& name) {
  return name.substr(0, name.find('.'));
}

template <typename T>
struct EpisodeForward {
  Var<T> prediction;                            // (1, H, W) foreground probability
  FeatureMap<T> query;                          // F_q
  std::optional<FeatureMap<T>> query_reflectance;  // F_r
  FeatureMap<T> query_fused;                    // F'_q, the matching space
  std::vector<FeatureMap<T>> support;           // support maps in prototype space
  std::vector<FeatureMap<T>> support_reflectance;  // F_s,r when kept separate
  Prototype<T> prototype;                       // P (merged over shots)
  std::optional<Prototype<T>> reflectance_prototype;  // P_r
  Prototype<T> fused;                           // P'
  std::optional<Prototype<T>> fused_reflectance;  // P'_r
  Prototype<T> augmented;                       // P''
};

/// Full episode pipeline: decomposition, paired encoders, query fusion,
/// masked pooling, shot merging, prototype fusion, self-support augmentation
/// and cosine matching. Toggles:
///  - no reflectance: no decomposition, no reflectance encoder, no PFM;
///  - reflectance without PFM: RGB and reflectance features are concatenated
///    before a single pooling, and the query side is concatenated likewise;
///  - no ASPP: F'_q is the x2-upsampled F_q through a 1x1 projection.
template <typename T>
EpisodeForward<T> forward_episode(const Episode& episode, const ModelParams<T>& params,
                                  const TrainConfig& config) {
  require(episode.shot_count() >= 1, "forward_episode: episode has no support samples");
  const auto& query = episode.query;
  require(query.height() % 8 == 0 && query.width() % 8 == 0,
          "forward_episode: image size must be divisible by 8");
  for (const auto& s : episode.support) {
    require(s.height() == query.height() && s.width() == query.width(),
            "forward_episode: support and query sizes differ");
  }
  const Toggles& tg = config.toggles;
  const bool use_refl = tg.use_reflectance;
  const bool use_pfm = use_refl && tg.use_pfm;
  const T temperature = static_cast<T>(config.temperature);
  const double sigma = config.retinex_sigma > 0
                           ? config.retinex_sigma
                           : default_smoothing_sigma(query.height(), query.width());

  EpisodeForward<T> out;
  std::vector<Var<T>> support_rgb;
  for (const auto& s : episode.support) support_rgb.push_back(image_to_var<T>(s.image));
  const auto query_rgb = image_to_var<T>(query.image);

  const ConvEncoder<T> rgb_encoder{&params.rgb, config.padding};
  std::vector<FeatureMap<T>> support_rgb_features;
  std::vector<FeatureMap<T>> support_refl_features;
  if (use_refl) {
    const ConvEncoder<T> refl_encoder{&params.reflectance, config.padding};
    std::vector<Var<T>> support_refl;
    for (const auto& s : episode.support)
      support_refl.push_back(image_to_var<T>(decompose(s.image, sigma).reflectance));
    const auto query_refl = image_to_var<T>(decompose(query.image, sigma).reflectance);
    auto enc = encode_pairs<T>(query_rgb, query_refl, support_rgb, support_refl, rgb_encoder,
                               refl_encoder);
    out.query = enc.query;
    out.query_reflectance = enc.query_reflectance;
    support_rgb_features = std::move(enc.support);
    support_refl_features = std::move(enc.support_reflectance);
  } else {
    out.query = rgb_encoder(query_rgb);
    for (const auto& s : support_rgb) support_rgb_features.push_back(rgb_encoder(s));
  }

  if (tg.use_aspp) {
    const FeatureMap<T>& low = use_refl ? *out.query_reflectance : out.query;
    out.query_fused = aspp_fuse(out.query, low, params.aspp, config.padding);
  } else {
    out.query_fused = project_upsample(out.query, params.projection);
  }

  std::vector<Prototype<T>> shots;
  if (use_refl && !use_pfm) {
    const auto& fr = out.query_reflectance->grid;
    auto up_r = ops::resize_bilinear(fr, out.query_fused.height(), out.query_fused.width());
    out.query_fused.grid = ops::concat_channels<T>({out.query_fused.grid, up_r});
    for (std::size_t k = 0; k < support_rgb_features.size(); ++k) {
      FeatureMap<T> joint = support_rgb_features[k];
      joint.grid = ops::concat_channels<T>({support_rgb_features[k].grid,
                                            support_refl_features[k].grid});
      out.support.push_back(joint);
      shots.push_back(masked_average_pool(joint, episode.support[k].mask));
    }
    out.prototype = merge_prototypes(shots);
    out.fused = out.prototype;
  } else {
    out.support = support_rgb_features;
    for (std::size_t k = 0; k < support_rgb_features.size(); ++k)
      shots.push_back(masked_average_pool(support_rgb_features[k], episode.support[k].mask));
    out.prototype = merge_prototypes(shots);
    out.fused = out.prototype;
    if (use_pfm) {
      std::vector<Prototype<T>> refl_shots;
      for (std::size_t k = 0; k < support_refl_features.size(); ++k)
        refl_shots.push_back(masked_average_pool(support_refl_features[k], episode.support[k].mask));
      out.reflectance_prototype = merge_prototypes(refl_shots);
      auto [p, p_r] = pfm_fuse(out.prototype, *out.reflectance_prototype, params.pfm);
      out.fused = p;
      out.fused_reflectance = p_r;
      out.support_reflectance = support_refl_features;
    }
  }

  out.augmented = ssp_augment(out.fused, out.query_fused, config.ssp);
  out.prediction = match(out.augmented, out.query_fused, temperature);
  return out;
}

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> seg;
  Var<T> support;
  Var<T> query;
};

/// Joint objective of one episode: prediction BCE, support self-loss
/// (prototype and reflectance prototype) and query self-loss.
template <typename T>
LossTerms<T> episode_loss(const EpisodeForward<T>& fwd, const Episode& episode,
                          const TrainConfig& config) {
  const T temperature = static_cast<T>(config.temperature);
  std::vector<Mask> masks;
  for (const auto& s : episode.support) masks.push_back(s.mask);
  LossTerms<T> t;
  t.seg = bce(fwd.prediction, episode.query.mask);
  const Prototype<T>* refl = fwd.fused_reflectance ? &*fwd.fused_reflectance : nullptr;
  t.support = support_self_loss(fwd.fused, refl, fwd.support, fwd.support_reflectance, masks,
                                temperature);
  t.query = query_self_loss(fwd.query_fused, episode.query.mask, temperature);
  t.total = total_loss(t.seg, t.support, t.query, config.weights);
  return t;
}

/// lr0 * decay_factor^floor(iteration / decay_every).
inline double learning_rate(const TrainConfig& c, long iteration) {
  return c.lr0 * std::pow(c.decay_factor, static_cast<double>(iteration / c.decay_every));
}

template <typename T>
struct Checkpoint {
  TrainConfig config;
  std::uint64_t iteration = 0;
  ModelParams<T> params;
  std::vector<Tensor<T>> momentum;  // aligned with params.named(); empty before any step

  static Checkpoint initial(const TrainConfig& config) {
    Checkpoint cp;
    cp.config = config;
    cp.params = ModelParams<T>::init(config.channels, config.seed);
    return cp;
  }
};

class TrainingDiverged : public std::runtime_error {
  static std::string format_lr(double lr) {
    std::ostringstream os;
    os << lr;
    return os.str();
  }

 public:
  TrainingDiverged(long iteration, double lr)
      : std::runtime_error("training diverged (non-finite loss, gradient or weight) at "
                           "iteration " + std::to_string(iteration) + " (lr=" +
                           format_lr(lr) + ")"),
        iteration_(iteration), lr_(lr) {}
  long iteration() const { return iteration_; }
  double lr() const { return lr_; }

 private:
  long iteration_;
  double lr_;
};

struct StepLosses {
  double total = 0;
  double seg = 0;
  double support = 0;
  double query = 0;
};

/// Produces the training episode for (iteration, slot in the batch).
using EpisodeSource = std::function<Episode(long iteration, int slot)>;

/// SGD with momentum over a checkpoint's parameters:
/// v <- momentum * v + g ; p <- p - lr * v.
template <typename T>
class Trainer {
 public:
  explicit Trainer(Checkpoint<T> start) : cp_(std::move(start)) {
    cp_.config.validate();
    params_ = cp_.params.named();
    if (cp_.momentum.empty()) {
      for (auto& [name, v] : params_) {
        cp_.momentum.emplace_back(v.channels(), v.height(), v.width());
      }
    }
    require(cp_.momentum.size() == params_.size(), "Trainer: momentum table size mismatch");
  }

  /// One optimisation step over `batch`; losses are averaged across episodes.
  StepLosses step(const std::vector<Episode>& batch) {
    require(!batch.empty(), "Trainer::step: empty batch");
    const long iter = static_cast<long>(cp_.iteration);
    const double lr = learning_rate(cp_.config, iter);
    for (auto& [name, v] : params_) v.zero_grad();
    StepLosses losses;
    const T inv = T(1) / static_cast<T>(batch.size());
    for (const auto& ep : batch) {
      auto fwd = forward_episode(ep, cp_.params, cp_.config);
      auto terms = episode_loss(fwd, ep, cp_.config);
      auto scaled = ops::scale(terms.total, inv);
      backward(scaled);
      losses.total += static_cast<double>(terms.total.value()[0]) / batch.size();
      losses.seg += static_cast<double>(terms.seg.value()[0]) / batch.size();
      losses.support += static_cast<double>(terms.support.value()[0]) / batch.size();
      losses.query += static_cast<double>(terms.query.value()[0]) / batch.size();
    }
    // The losses are bounded, so a blown-up model shows in the weights first.
    auto finite = [](const Tensor<T>& t) {
      return std::all_of(t.begin(), t.end(), [](T x) { return std::isfinite(x); });
    };
    if (!std::isfinite(losses.total)) throw TrainingDiverged(iter, lr);
    for (auto& [name, v] : params_)
      if (!finite(v.grad())) throw TrainingDiverged(iter, lr);
    const T mu = static_cast<T>(cp_.config.momentum);
    const T step = static_cast<T>(lr);
    bool ok = true;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i].second.mutable_value();
      const auto& grad = params_[i].second.grad();
      auto& buf = cp_.momentum[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        buf[j] = mu * buf[j] + grad[j];
        value[j] -= step * buf[j];
      }
      ok = ok && finite(value);
    }
    if (!ok) throw TrainingDiverged(iter, lr);
    ++cp_.iteration;
    return losses;
  }

  const Checkpoint<T>& checkpoint() const { return cp_; }
  Checkpoint<T> release() { return std::move(cp_); }

 private:
  Checkpoint<T> cp_;
  NamedParams<T> params_;
};

inline std::string format_log_line(long iteration, double lr, const StepLosses& l) {
  std::ostringstream os;
  os << std::setprecision(6) << "iter=" << iteration << " lr=" << lr << " loss=" << l.total
     << " seg=" << l.seg << " ls=" << l.support << " lq=" << l.query;
  return os.str();
}

/// Runs config.iterations steps from a fresh initialisation (or from
/// `resume`), logging one line per iteration.
template <typename T>
Checkpoint<T> train(const TrainConfig& config, const EpisodeSource& source,
                    std::ostream* log = nullptr, std::optional<Checkpoint<T>> resume = {}) {
  config.validate();
  Trainer<T> trainer(resume ? std::move(*resume) : Checkpoint<T>::initial(config));
  while (trainer.checkpoint().iteration < static_cast<std::uint64_t>(config.iterations)) {
    const long iter = static_cast<long>(trainer.checkpoint().iteration);
    std::vector<Episode> batch;
    for (int b = 0; b < config.batch_episodes; ++b) batch.push_back(source(iter, b));
    const double lr = learning_rate(config, iter);
    const auto losses = trainer.step(batch);
    if (log) *log << format_log_line(iter, lr, losses) << '\n';
  }
  return trainer.release();
}

/// Seed-determined training episodes from a base split, with independent
/// random horizontal flips on every image when enabled.
inline EpisodeSource episode_source(const Dataset& dataset, const TrainConfig& config) {
  return [&dataset, config](long iter, int slot) {
    const auto it = static_cast<std::uint64_t>(iter);
    const auto sl = static_cast<std::uint64_t>(slot);
    Episode ep = sample_episode(dataset, config.shots, derive_seed(config.seed, {1, it, sl}));
    if (config.augment_hflip) {
      for (std::size_t k = 0; k < ep.support.size(); ++k)
        ep.support[k] = augment_hflip(ep.support[k], derive_seed(config.seed, {2, it, sl, k}));
      ep.query = augment_hflip(ep.query, derive_seed(config.seed, {3, it, sl}));
    }
    return ep;
  };
}

template <typename T>
Checkpoint<T> train(const TrainConfig& config, const Dataset& dataset,
                    std::ostream* log = nullptr) {
  config.validate();
  dataset.validate();
  if (dataset.split != SplitTag::Base) {
    throw std::invalid_argument("train: dataset must be the base split");
  }
  return train<T>(config, episode_source(dataset, config), log);
}

// ---------------------------------------------------------------------------
// Evaluation

struct IouCounts {
  std::uint64_t fg_intersection = 0;
  std::uint64_t fg_union = 0;
  std::uint64_t bg_intersection = 0;
  std::uint64_t bg_union = 0;

  bool operator==(const IouCounts&) const = default;
};

/// Adds per-class intersection and union counts of a binary prediction.
inline IouCounts& miou_accumulate(const Mask& pred, const Mask& gt, IouCounts& acc) {
  require(pred.same_shape(gt), "miou_accumulate: shape mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i], g = gt[i];
    require((p == 0 || p == 1) && (g == 0 || g == 1), "miou_accumulate: non-binary input");
    acc.fg_intersection += (p & g);
    acc.fg_union += (p | g);
    acc.bg_intersection += (!p && !g);
    acc.bg_union += (!p || !g);
  }
  return acc;
}

/// Intersection over union; an empty union counts as perfect agreement.
inline double iou(std::uint64_t intersection, std::uint64_t uni) {
  return uni == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(uni);
}

struct EvalReport {
  double miou = 0;
  double fg_iou = 0;
  double bg_iou = 0;
  int episode_count = 0;
  int K = 0;
  std::uint64_t seed = 0;
  std::vector<double> per_episode_ious;

  static EvalReport from_counts(const IouCounts& c) {
    EvalReport r;
    r.fg_iou = iou(c.fg_intersection, c.fg_union);
    r.bg_iou = iou(c.bg_intersection, c.bg_union);
    r.miou = (r.fg_iou + r.bg_iou) / 2;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"miou", r.miou},
                     {"fg_iou", r.fg_iou},
                     {"bg_iou", r.bg_iou},
                     {"episode_count", r.episode_count},
                     {"K", r.K},
                     {"seed", r.seed},
                     {"per_episode_ious", r.per_episode_ious}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("miou").get_to(r.miou);
  j.at("fg_iou").get_to(r.fg_iou);
  j.at("bg_iou").get_to(r.bg_iou);
  j.at("episode_count").get_to(r.episode_count);
  j.at("K").get_to(r.K);
  j.at("seed").get_to(r.seed);
  j.at("per_episode_ious").get_to(r.per_episode_ious);
}

/// Foreground where the probability exceeds 0.5.
template <typename T>
Mask binarize(const Tensor<T>& probability) {
  Mask m(1, probability.height(), probability.width());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = probability[i] > T(0.5) ? 1 : 0;
  return m;
}

/// Produces the binary prediction of one episode's query for a checkpoint.
template <typename T>
Mask predict_episode(const Episode& episode, const ModelParams<T>& frozen,
                     const TrainConfig& config) {
  return binarize(forward_episode(episode, frozen, config).prediction.value());
}

/// Dataset-level mIoU over `episode_count` seed-determined episodes.
template <typename T>
EvalReport evaluate(const Checkpoint<T>& checkpoint, const Dataset& dataset, int shots,
                    int episode_count, std::uint64_t seed) {
  if (episode_count < 1) throw std::invalid_argument("evaluate: episode_count must be >= 1");
  dataset.validate();
  const auto params = checkpoint.params.frozen();
  IouCounts total;
  std::vector<double> per_episode;
  per_episode.reserve(episode_count);
  for (int e = 0; e < episode_count; ++e) {
    const auto ep = sample_episode(dataset, shots, derive_seed(seed, {static_cast<std::uint64_t>(e)}));
    const auto pred = predict_episode(ep, params, checkpoint.config);
    IouCounts one;
    miou_accumulate(pred, ep.query.mask, one);
    miou_accumulate(pred, ep.query.mask, total);
    per_episode.push_back(EvalReport::from_counts(one).miou);
  }
  auto report = EvalReport::from_counts(total);
  report.episode_count = episode_count;
  report.K = shots;
  report.seed = seed;
  report.per_episode_ious = std::move(per_episode);
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

/// Component rows: baseline, + reflectance, + PFM, + ASPP.
inline constexpr std::array<Toggles, 4> kAblationRows{{
    {false, false, false},
    {true, false, false},
    {true, true, false},
    {true, true, true},
}};

struct AblationRow {
  Toggles toggles;
  EvalReport one_shot;
  EvalReport five_shot;
};

inline void to_json(nlohmann::json& j, const AblationRow& r) {
  j = nlohmann::json{{"use_reflectance", r.toggles.use_reflectance},
                     {"use_pfm", r.toggles.use_pfm},
                     {"use_aspp", r.toggles.use_aspp},
                     {"miou_1shot", r.one_shot.miou},
                     {"miou_5shot", r.five_shot.miou},
                     {"one_shot", r.one_shot},
                     {"five_shot", r.five_shot}};
}

/// Trains and evaluates each ablation row with the shared base seed.
template <typename T>
std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& train_set,
                                      const Dataset& test_set, std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  for (const auto& toggles : kAblationRows) {
    TrainConfig cfg = base;
    cfg.toggles = toggles;
    const auto cp = train<T>(cfg, train_set, log);
    AblationRow row;
    row.toggles = toggles;
    row.one_shot = evaluate(cp, test_set, 1, base.eval_episodes, base.seed);
    row.five_shot = evaluate(cp, test_set, 5, base.eval_episodes, base.seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  auto mark = [](bool b) { return b ? "x" : "-"; };
  os << std::left << std::setw(13) << "Reflectance" << std::setw(6) << "PFM" << std::setw(7)
     << "ASPP" << std::right << std::setw(10) << "1-shot" << std::setw(10) << "5-shot" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(13) << mark(r.toggles.use_reflectance) << std::setw(6)
       << mark(r.toggles.use_pfm) << std::setw(7) << mark(r.toggles.use_aspp) << std::right
       << std::setw(10) << 100 * r.one_shot.miou << std::setw(10) << 100 * r.five_shot.miou
       << '\n';
  }
  return os.str();
}

}  // namespace cracknex
