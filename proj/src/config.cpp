#include "maskseg/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "maskseg/kvtext.hpp"

namespace maskseg {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: not a boolean: " + v);
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  scene.validate();
  if (scene.height != model.image_size || scene.width != model.image_size)
    throw std::invalid_argument("config: scene size must match model image_size");
  if (model.num_classes != scene.num_classes())
    throw std::invalid_argument("config: model classes must match the scene class count");
  if (points < 1) throw std::invalid_argument("config: points must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("config: lr must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be >= 0");
  if (backbone_lr_mult <= 0.0) throw std::invalid_argument("config: backbone_lr_mult must be > 0");
  if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (!(decay1 > 0.0 && decay1 < 1.0 && decay2 > 0.0 && decay2 < 1.0 && decay1 < decay2))
    throw std::invalid_argument("config: decay fractions must satisfy 0 < decay1 < decay2 < 1");
  if (decay_factor <= 1.0) throw std::invalid_argument("config: decay_factor must be > 1");
  if (train_scenes < 1 || val_scenes < 1)
    throw std::invalid_argument("config: dataset sizes must be >= 1");
  if (eval_top_k < 0) throw std::invalid_argument("config: eval_top_k must be >= 0");
  if (scene.max_instances + 2 > model.queries)
    throw std::invalid_argument("config: queries must cover max_instances plus stuff segments");
}

void TrainConfig::finalize() {
  scene.height = model.image_size;
  scene.width = model.image_size;
  model.num_classes = scene.num_classes();
  model.thing_classes = scene.thing_classes;
  panoptic.mask_threshold = model.mask_threshold;
  validate();
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_text(text);
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  for (const auto& [key, value] : parse_kv_lines(text)) {
    if (key == "image_size") cfg.model.image_size = std::stoi(value);
    else if (key == "embed_dim") cfg.model.embed_dim = std::stoi(value);
    else if (key == "queries") cfg.model.queries = std::stoi(value);
    else if (key == "repeats") cfg.model.repeats = std::stoi(value);
    else if (key == "heads") cfg.model.heads = std::stoi(value);
    else if (key == "ffn_dim") cfg.model.ffn_dim = std::stoi(value);
    else if (key == "mask_threshold") cfg.model.mask_threshold = std::stod(value);
    else if (key == "backbone_widths") {
      std::istringstream is(value);
      std::string tok;
      for (int i = 0; i < 4; ++i) {
        if (!std::getline(is, tok, ','))
          throw std::invalid_argument("config: backbone_widths needs 4 values");
        cfg.model.backbone_widths[i] = std::stoi(tok);
      }
    }
    else if (key == "thing_classes") cfg.scene.thing_classes = std::stoi(value);
    else if (key == "stuff_classes") cfg.scene.stuff_classes = std::stoi(value);
    else if (key == "max_instances") cfg.scene.max_instances = std::stoi(value);
    else if (key == "occlusion") cfg.scene.allow_occlusion = parse_bool(value);
    else if (key == "noise_sigma") cfg.scene.noise_sigma = std::stod(value);
    else if (key == "lambda_ce") cfg.weights.lambda_ce = std::stod(value);
    else if (key == "lambda_dice") cfg.weights.lambda_dice = std::stod(value);
    else if (key == "lambda_cls") cfg.weights.lambda_cls = std::stod(value);
    else if (key == "no_object_weight") cfg.weights.no_object_weight = std::stod(value);
    else if (key == "points") cfg.points = std::stoi(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
    else if (key == "backbone_lr_mult") cfg.backbone_lr_mult = std::stod(value);
    else if (key == "steps") cfg.steps = std::stoi(value);
    else if (key == "batch_size") cfg.batch_size = std::stoi(value);
    else if (key == "decay1") cfg.decay1 = std::stod(value);
    else if (key == "decay2") cfg.decay2 = std::stod(value);
    else if (key == "decay_factor") cfg.decay_factor = std::stod(value);
    else if (key == "train_scenes") cfg.train_scenes = std::stoi(value);
    else if (key == "val_scenes") cfg.val_scenes = std::stoi(value);
    else if (key == "eval_top_k") cfg.eval_top_k = std::stoi(value);
    else if (key == "object_score_threshold") cfg.panoptic.object_score_threshold = std::stod(value);
    else if (key == "overlap_threshold") cfg.panoptic.overlap_threshold = std::stod(value);
    else if (key == "attention" || key == "scales" || key == "loss_points" || key == "queries_mode" ||
             key == "layer_order" || key == "dropout")
      cfg.apply_ablation(key == "queries_mode" ? "queries" : key, value);
    else throw std::invalid_argument("config: unknown key: " + key);
  }
  cfg.finalize();
  return cfg;
}

void TrainConfig::apply_ablation(const std::string& key, const std::string& value) {
  if (key == "attention") model.attention = attention_from_string(value);
  else if (key == "scales") model.routing = routing_from_string(value);
  else if (key == "queries") model.query_init = query_init_from_string(value);
  else if (key == "layer_order") {
    if (value == "MA-SA-FFN") model.self_attention_first = false;
    else if (value == "SA-MA-FFN") model.self_attention_first = true;
    else throw std::invalid_argument("ablation: unknown layer_order: " + value);
  } else if (key == "dropout") model.dropout = std::stod(value);
  else if (key == "loss_points") {
    if (value == "point") point_loss = true;
    else if (value == "mask") point_loss = false;
    else throw std::invalid_argument("ablation: loss_points must be point or mask");
  } else throw std::invalid_argument("ablation: unknown key: " + key);
}

double lr_at_step(const TrainConfig& cfg, int step) {
  int t1 = static_cast<int>(cfg.decay1 * cfg.steps);
  int t2 = static_cast<int>(cfg.decay2 * cfg.steps);
  if (step < t1) return cfg.lr;
  if (step < t2) return cfg.lr / cfg.decay_factor;
  return cfg.lr / (cfg.decay_factor * cfg.decay_factor);
}

}  // namespace maskseg
