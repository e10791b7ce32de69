// Builds a synthetic crack dataset in memory, trains a small model for a few
// iterations on normal-light images and evaluates it on low-light ones.

#include <chrono>
#include <iostream>

#include "cracknex/engine.hpp"

int main(int argc, char** argv) {
  using namespace cracknex;
  const int iterations = argc > 1 ? std::stoi(argv[1]) : 50;

  Dataset train_set, test_set;
  test_set.split = SplitTag::Novel;
  for (int i = 0; i < 40; ++i) train_set.samples.push_back(generate_synthetic_crack(64, 64, i));
  for (int i = 0; i < 20; ++i) {
    auto s = generate_synthetic_crack(64, 64, 1000 + i);
    test_set.samples.push_back(synthesize_lowlight(s, LowLightParams{}, 5000 + i));
  }

  TrainConfig cfg;
  cfg.iterations = iterations;
  cfg.channels = 16;
  cfg.image_height = cfg.image_width = 64;
  cfg.lr0 = 1e-2;
  cfg.decay_every = 1000;

  const auto t0 = std::chrono::steady_clock::now();
  const auto cp = train<float>(cfg, train_set, &std::cout);
  const auto t1 = std::chrono::steady_clock::now();
  const auto report = evaluate(cp, test_set, 1, 100, 7);
  const auto t2 = std::chrono::steady_clock::now();
  std::cout << "train " << std::chrono::duration<double>(t1 - t0).count() << " s, eval "
            << std::chrono::duration<double>(t2 - t1).count() << " s\n";
  std::cout << "mIoU=" << report.miou << " fg=" << report.fg_iou << " bg=" << report.bg_iou
            << '\n';
}
