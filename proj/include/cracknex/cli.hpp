#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cracknex/checkpoint.hpp"
#include "cracknex/config.hpp"
#include "cracknex/data.hpp"
#include "cracknex/engine.hpp"
#include "cracknex/image_io.hpp"
#include "cracknex/retinex.hpp"

namespace cracknex::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Raised for bad flag values that CLI11 cannot check on its own.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;

/// Flag wins, then CRACKNEX_SEED, then the fallback.
inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                                  std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("CRACKNEX_SEED"); env && *env) {
    std::uint64_t v = 0;
    const std::string s(env);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw UsageError("CRACKNEX_SEED is not an unsigned integer: '" + s + "'");
    return v;
  }
  return fallback;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline void require_parent(const fs::path& path) {
  const auto parent = path.parent_path();
  if (!parent.empty() && !fs::is_directory(parent))
    throw UsageError("output directory '" + parent.string() + "' does not exist");
}

inline std::vector<double> split_reals(const std::string& text, std::size_t n,
                                       const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + item + "' is not a number");
    }
  }
  if (out.size() != n)
    throw UsageError(flag + " expects " + std::to_string(n) + " comma-separated values");
  return out;
}

/// Image and mask resized to the model's input geometry.
inline ImageSample load_pair(const fs::path& image, const fs::path& mask, int h, int w) {
  ImageSample s;
  s.id = image.stem().string();
  s.image = resize_bilinear(read_image_png(image), h, w);
  const auto g = resize_nearest(read_gray_png(mask), h, w);
  s.mask = Mask(1, h, w);
  for (std::size_t i = 0; i < g.size(); ++i) s.mask[i] = g[i] >= 0.5 ? 1 : 0;
  return s;
}

struct TrainArgs {
  std::string config, data, out, log;
  std::optional<std::uint64_t> seed;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  cfg.seed = resolve_seed(a.seed, cfg.seed);
  require_parent(a.out);
  const auto ds = load_dataset(a.data, cfg.image_height, cfg.image_width, SplitTag::Base);
  std::ofstream log_file;
  std::ostream* log = &out;
  if (!a.log.empty()) {
    require_parent(a.log);
    log_file.open(a.log, std::ios::trunc);
    if (!log_file) throw IoError("cannot open log '" + a.log + "'");
    log = &log_file;
  }
  const auto cp = train<float>(cfg, ds, log);
  save_checkpoint(cp, a.out);
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data, json;
  int shots = 1;
  std::optional<int> episodes;
  std::optional<std::uint64_t> seed;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto cp = load_checkpoint<float>(a.checkpoint);
  const auto seed = resolve_seed(a.seed, cp.config.seed);
  const int episodes = a.episodes.value_or(cp.config.eval_episodes);
  if (!a.json.empty()) require_parent(a.json);
  const auto ds =
      load_dataset(a.data, cp.config.image_height, cp.config.image_width, SplitTag::Novel);
  const auto report = evaluate(cp, ds, a.shots, episodes, seed);
  if (!a.json.empty()) write_text(a.json, nlohmann::json(report).dump(2) + "\n");
  out << "mIoU=" << std::setprecision(6) << report.miou << '\n';
  return kExitOk;
}

struct PredictArgs {
  std::string checkpoint, query, out;
  std::vector<std::string> supports;
};

inline int cmd_predict(const PredictArgs& a, std::ostream& out) {
  require_parent(a.out);
  std::vector<std::pair<fs::path, fs::path>> pairs;
  for (const auto& s : a.supports) {
    const auto comma = s.find(',');
    if (comma == std::string::npos)
      throw UsageError("--support expects IMAGE,MASK but got '" + s + "'");
    const fs::path img = s.substr(0, comma), mask = s.substr(comma + 1);
    if (!fs::is_regular_file(img)) throw UsageError("support image '" + img.string() + "' not found");
    if (!fs::is_regular_file(mask)) throw UsageError("support mask '" + mask.string() + "' not found");
    pairs.emplace_back(img, mask);
  }
  const auto cp = load_checkpoint<float>(a.checkpoint);
  const int h = cp.config.image_height, w = cp.config.image_width;
  Episode ep;
  for (const auto& [img, mask] : pairs) ep.support.push_back(load_pair(img, mask, h, w));
  const auto query = read_image_png(a.query);
  ep.query.id = fs::path(a.query).stem().string();
  ep.query.image = resize_bilinear(query, h, w);
  ep.query.mask = Mask(1, h, w);
  const auto fwd = forward_episode(ep, cp.params.frozen(), cp.config);
  const auto prob = resize_bilinear(fwd.prediction.value().template cast<double>(),
                                    query.height(), query.width());
  const auto mask = binarize(prob);
  write_mask_png(a.out, mask);
  std::size_t fg = 0;
  for (auto v : mask) fg += v;
  out << "foreground_fraction=" << static_cast<double>(fg) / static_cast<double>(mask.size())
      << '\n';
  return kExitOk;
}

struct DecomposeArgs {
  std::string input, out;
  std::optional<double> sigma;
};

inline int cmd_decompose(const DecomposeArgs& a, std::ostream& out) {
  if (a.sigma && !(*a.sigma > 0)) throw UsageError("--sigma must be > 0");
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw UsageError("no PNG files in '" + a.input + "'");
  } else {
    inputs.push_back(a.input);
  }
  fs::create_directories(a.out);
  for (const auto& path : inputs) {
    const auto image = read_image_png(path);
    const double sigma = a.sigma.value_or(default_smoothing_sigma(image.height(), image.width()));
    const auto d = decompose(image, sigma);
    const auto stem = path.stem().string();
    write_image_png(fs::path(a.out) / (stem + "_reflectance.png"), d.reflectance);
    write_gray_png(fs::path(a.out) / (stem + "_illumination.png"), d.illumination);
  }
  out << "decomposed " << inputs.size() << " image(s)\n";
  return kExitOk;
}

struct SynthArgs {
  int count = 0;
  std::vector<int> size{96, 96};
  std::optional<std::uint64_t> seed;
  std::string out, lowlight;
  CrackStyle style;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.count < 1) throw UsageError("--count must be >= 1");
  const int h = a.size[0], w = a.size[1];
  if (h <= 0 || w <= 0 || h % 8 || w % 8)
    throw UsageError("--size must be two positive multiples of 8");
  std::optional<LowLightParams> ll;
  if (!a.lowlight.empty()) {
    const auto v = split_reals(a.lowlight, 3, "--lowlight");
    ll = LowLightParams{v[0], v[1], v[2]};
    if (!(ll->gamma > 0) || !(ll->gain > 0 && ll->gain <= 1) || !(ll->noise_sigma >= 0))
      throw UsageError("--lowlight requires gamma > 0, gain in (0,1], sigma >= 0");
  }
  if (a.style.crack_width_px < 1 || a.style.crack_width_px >= std::min(h, w))
    throw UsageError("--crack-width must be in [1, min(H,W))");
  const auto seed = resolve_seed(a.seed, 0);
  Dataset normal, dark;
  for (int i = 0; i < a.count; ++i) {
    auto s = generate_synthetic_crack(h, w, derive_seed(seed, {static_cast<std::uint64_t>(i)}),
                                      a.style);
    std::ostringstream id;
    id << "crack_" << std::setw(4) << std::setfill('0') << i;
    s.id = id.str();
    if (ll) {
      dark.samples.push_back(synthesize_lowlight(
          s, *ll, derive_seed(seed, {static_cast<std::uint64_t>(i), 0x11})));
    }
    normal.samples.push_back(std::move(s));
  }
  save_dataset(normal, a.out);
  if (ll) save_dataset(dark, fs::path(a.out) / "lowlight");
  out << "wrote " << a.count << " sample(s) to " << a.out << (ll ? " (+ lowlight/)" : "") << '\n';
  return kExitOk;
}

struct AblateArgs {
  std::string config, train_data, test_data, out, log;
  std::optional<std::uint64_t> seed;
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  cfg.seed = resolve_seed(a.seed, cfg.seed);
  require_parent(a.out);
  const auto train_set =
      load_dataset(a.train_data, cfg.image_height, cfg.image_width, SplitTag::Base);
  const auto test_set =
      load_dataset(a.test_data, cfg.image_height, cfg.image_width, SplitTag::Novel);
  std::ofstream log_file;
  std::ostream* log = nullptr;
  if (!a.log.empty()) {
    require_parent(a.log);
    log_file.open(a.log, std::ios::trunc);
    if (!log_file) throw IoError("cannot open log '" + a.log + "'");
    log = &log_file;
  }
  const auto rows = run_ablation<float>(cfg, train_set, test_set, log);
  write_text(a.out, nlohmann::json(rows).dump(2) + "\n");
  out << format_ablation_table(rows);
  return kExitOk;
}

}  // namespace detail

/// Parses `args` (without the program name) and runs one subcommand.
/// Returns 0 on success, 1 on usage or configuration errors, 2 on runtime
/// failures; diagnostics go to `err` as a single line.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Few-shot low-light crack segmentation", "cracknex"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cracknex 1.0");

  detail::TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Episodic training on a base split");
  train->add_option("--config", train_args.config, "INI config file")->check(CLI::ExistingFile);
  train->add_option("--data", train_args.data, "Dataset root (images/, masks/)")->required();
  train->add_option("--out", train_args.out, "Checkpoint path to write")->required();
  train->add_option("--seed", train_args.seed, "Seed (overrides config and CRACKNEX_SEED)");
  train->add_option("--log", train_args.log, "Write the loss log here instead of stdout");

  detail::EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "mIoU over seeded episodes of a novel split");
  eval->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_args.data, "Dataset root")->required();
  eval->add_option("--shots", eval_args.shots, "Support images per episode")
      ->check(CLI::PositiveNumber);
  eval->add_option("--episodes", eval_args.episodes, "Episode count (default: from config)")
      ->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_args.seed, "Episode seed");
  eval->add_option("--json", eval_args.json, "Write the report here");

  detail::PredictArgs predict_args;
  auto* predict = app.add_subcommand("predict", "Segment one query from annotated supports");
  predict->add_option("--checkpoint", predict_args.checkpoint)
      ->required()
      ->check(CLI::ExistingFile);
  predict->add_option("--support", predict_args.supports, "IMAGE,MASK (repeat for K shots)")
      ->required();
  predict->add_option("--query", predict_args.query)->required()->check(CLI::ExistingFile);
  predict->add_option("--out", predict_args.out, "Mask PNG to write (0/255)")->required();

  detail::DecomposeArgs decompose_args;
  auto* decomp = app.add_subcommand("decompose", "Reflectance/illumination split of PNGs");
  decomp->add_option("--input", decompose_args.input, "PNG file or directory")
      ->required()
      ->check(CLI::ExistingPath);
  decomp->add_option("--out", decompose_args.out, "Output directory")->required();
  decomp->add_option("--sigma", decompose_args.sigma, "Illumination blur (default min(H,W)/16)");

  detail::SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Write a procedural crack dataset");
  synth->add_option("--count", synth_args.count)->required();
  synth->add_option("--size", synth_args.size, "H W")->expected(2);
  synth->add_option("--seed", synth_args.seed);
  synth->add_option("--out", synth_args.out, "Dataset root to write")->required();
  synth->add_option("--lowlight", synth_args.lowlight, "GAMMA,GAIN,SIGMA for a lowlight/ copy");
  synth->add_option("--crack-width", synth_args.style.crack_width_px);
  synth->add_option("--contrast", synth_args.style.contrast)->check(CLI::Range(1e-9, 1.0));
  synth->add_option("--texture-scale", synth_args.style.texture_scale)
      ->check(CLI::PositiveNumber);

  detail::AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the four component rows");
  ablate->add_option("--config", ablate_args.config)->check(CLI::ExistingFile);
  ablate->add_option("--train-data", ablate_args.train_data)->required();
  ablate->add_option("--test-data", ablate_args.test_data)->required();
  ablate->add_option("--out", ablate_args.out, "JSON table to write")->required();
  ablate->add_option("--seed", ablate_args.seed);
  ablate->add_option("--log", ablate_args.log, "Training log file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return detail::cmd_train(train_args, out);
    if (*eval) return detail::cmd_eval(eval_args, out);
    if (*predict) return detail::cmd_predict(predict_args, out);
    if (*decomp) return detail::cmd_decompose(decompose_args, out);
    if (*synth) return detail::cmd_synth(synth_args, out);
    if (*ablate) return detail::cmd_ablate(ablate_args, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace cracknex::cli
