#pragma once
#include <string>

#include "maskseg/criterion.hpp"
#include "maskseg/inference.hpp"
#include "maskseg/model.hpp"
#include "maskseg/toydata.hpp"

namespace maskseg {

// Full run configuration, read from a flat `key = value` file (one pair per
// line, `#` comments). Every key has a default; unknown keys are errors.
struct TrainConfig {
  ModelConfig model;
  SceneConfig scene;
  LossWeights weights;
  PanopticConfig panoptic;

  int points = 1024;       // K sampled points per mask-loss evaluation
  bool point_loss = true;  // false: dense grid-center evaluation (mask ablation)

  double lr = 1e-4;
  double weight_decay = 0.05;
  double backbone_lr_mult = 0.1;
  int steps = 5000;
  int batch_size = 4;
  double decay1 = 0.9;  // schedule fractions
  double decay2 = 0.95;
  double decay_factor = 10.0;

  int train_scenes = 512;
  int val_scenes = 64;
  int eval_top_k = 100;

  void validate() const;
  void finalize();  // derive model.num_classes etc. from the scene config
  static TrainConfig from_file(const std::string& path);
  static TrainConfig from_text(const std::string& text);
  // Ablation switches, also accepted in config files:
  //   attention=masked|cross, scales=multi|single-1/8|single-1/16|single-1/32,
  //   loss_points=point|mask, queries=learnable-supervised|
  //   learnable-unsupervised|zero-init, layer_order=MA-SA-FFN|SA-MA-FFN,
  //   dropout=<double>
  void apply_ablation(const std::string& key, const std::string& value);
};

// Piecewise-constant step schedule: base lr until decay1*steps, /factor until
// decay2*steps, /factor^2 after.
double lr_at_step(const TrainConfig& cfg, int step);

}  // namespace maskseg
