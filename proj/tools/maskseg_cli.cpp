#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "maskseg/config.hpp"
#include "maskseg/metrics.hpp"
#include "maskseg/model.hpp"
#include "maskseg/render.hpp"
#include "maskseg/toydata.hpp"
#include "maskseg/train.hpp"

namespace {

using namespace maskseg;

TrainConfig load_config(const std::string& path) {
  if (path.empty()) {
    TrainConfig cfg;
    cfg.finalize();
    return cfg;
  }
  return TrainConfig::from_file(path);
}

void apply_ablations(TrainConfig& cfg, const std::vector<std::string>& ablations) {
  for (const auto& a : ablations) {
    size_t eq = a.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--ablation", "expected KEY=VALUE, got: " + a);
    cfg.apply_ablation(a.substr(0, eq), a.substr(eq + 1));
  }
  cfg.finalize();
}

// Model for eval/analyze/render: config comes from the checkpoint header; an
// explicit --config must agree with it.
Model load_model_checked(const std::string& ckpt_path, const TrainConfig& cfg, bool had_config) {
  Model model = Model::load(ckpt_path);
  if (had_config && !(model.config() == cfg.model))
    throw std::runtime_error("checkpoint model config does not match --config");
  return model;
}

int run(int argc, char** argv) {
  CLI::App app{"masked-attention segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_dir = ".", checkpoint_path, task = "panoptic";
  std::string analysis = "fg-attention";
  uint64_t seed = 1;
  int count = -1, index = 0;
  std::vector<std::string> ablations;

  auto add_common = [&](CLI::App* cmd, bool needs_data) {
    cmd->add_option("--config", config_path, "flat key = value configuration file");
    cmd->add_option("--seed", seed, "root seed");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--ablation", ablations, "KEY=VALUE ablation override (repeatable)");
    if (needs_data) cmd->add_option("--data", data_path, "dataset container path")->required();
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate train/val datasets");
  add_common(gen, false);
  gen->add_option("--count", count, "scene count override (writes a single file)");

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train, true);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, true);
  eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  eval->add_option("--task", task, "panoptic | instance | semantic");

  CLI::App* analyze = app.add_subcommand("analyze", "run a trained-model analysis");
  add_common(analyze, true);
  analyze->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  analyze->add_option("--analysis", analysis, "fg-attention | per-layer-pq | proposal-ar");

  CLI::App* render = app.add_subcommand("render", "render a mask overlay image");
  add_common(render, true);
  render->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  render->add_option("--task", task, "panoptic | instance | semantic");
  render->add_option("--index", index, "scene index in the dataset");

  app.parse(argc, argv);

  TrainConfig cfg = load_config(config_path);
  apply_ablations(cfg, ablations);
  std::filesystem::create_directories(out_dir);

  if (gen->parsed()) {
    Rng root(seed);
    if (count >= 0) {
      auto scenes = generate_dataset(cfg.scene, count, root.split(1).next_u64());
      save_dataset(scenes, out_dir + "/data.bin");
      std::cout << "wrote " << scenes.size() << " scenes to " << out_dir << "/data.bin\n";
    } else {
      auto train_scenes = generate_dataset(cfg.scene, cfg.train_scenes, root.split(1).next_u64());
      auto val_scenes = generate_dataset(cfg.scene, cfg.val_scenes, root.split(2).next_u64());
      save_dataset(train_scenes, out_dir + "/train.bin");
      save_dataset(val_scenes, out_dir + "/val.bin");
      std::cout << "wrote " << train_scenes.size() << " train and " << val_scenes.size()
                << " val scenes to " << out_dir << "\n";
    }
    return 0;
  }

  if (train->parsed()) {
    auto scenes = load_dataset(data_path);
    TrainResult res = train_model(cfg, scenes, seed, out_dir);
    std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
    std::cout << "step log: " << res.log_path << "\n";
    return 0;
  }

  if (eval->parsed() || render->parsed()) {
    if (task != "panoptic" && task != "instance" && task != "semantic")
      throw CLI::ValidationError("--task", "unknown task: " + task);
  }

  if (eval->parsed()) {
    Model model = load_model_checked(checkpoint_path, cfg, !config_path.empty());
    auto scenes = load_dataset(data_path);
    EvalReport report = evaluate_task(model, scenes, task, cfg);
    std::cout << format_report_table(report);
    std::string path = out_dir + "/results_" + task + ".txt";
    write_results_kv(report, path);
    std::cout << "results written to " << path << "\n";
    return 0;
  }

  if (analyze->parsed()) {
    Model model = load_model_checked(checkpoint_path, cfg, !config_path.empty());
    auto scenes = load_dataset(data_path);
    std::string path = out_dir + "/analysis_" + analysis + ".txt";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("analyze: cannot open " + path);
    if (analysis == "fg-attention") {
      FgBgStats st = attention_fg_stats(model, scenes, cfg.weights, cfg.points, seed);
      f << "resolution fg bg\n";
      const char* names[3] = {"1/32", "1/16", "1/8"};
      for (int s = 0; s < 3; ++s) f << names[s] << " " << st.fg[s] << " " << st.bg[s] << "\n";
      f << "average " << st.fg_avg << " " << st.bg_avg << "\n";
    } else if (analysis == "per-layer-pq") {
      std::vector<double> pq = per_layer_pq(model, scenes, cfg);
      f << "layer pq\n";
      for (size_t s = 0; s < pq.size(); ++s) f << s << " " << pq[s] << "\n";
    } else if (analysis == "proposal-ar") {
      std::vector<double> ar = per_layer_ar(model, scenes, 100);
      f << "layer ar100\n";
      for (size_t s = 0; s < ar.size(); ++s) f << s << " " << ar[s] << "\n";
    } else {
      throw CLI::ValidationError("--analysis", "unknown analysis: " + analysis);
    }
    std::cout << "analysis written to " << path << "\n";
    return 0;
  }

  if (render->parsed()) {
    Model model = load_model_checked(checkpoint_path, cfg, !config_path.empty());
    auto scenes = load_dataset(data_path);
    if (index < 0 || index >= static_cast<int>(scenes.size()))
      throw std::runtime_error("render: scene index out of range");
    const GroundTruthScene& scene = scenes[index];
    ForwardResult fwd = model.forward(scene.image);
    const SegmentPrediction& pred = fwd.predictions.back();
    std::vector<bool> things = model.config().is_thing_class();
    std::vector<uint8_t> rgb;
    if (task == "panoptic")
      rgb = render_panoptic(scene.image, panoptic_inference(pred, scene.height, scene.width,
                                                            things, cfg.panoptic));
    else if (task == "instance")
      rgb = render_instances(scene.image,
                             instance_inference(pred, scene.height, scene.width, things,
                                                cfg.eval_top_k, cfg.model.mask_threshold));
    else if (task == "semantic")
      rgb = render_labels(scene.image, semantic_inference(pred, scene.height, scene.width),
                          scene.height, scene.width);
    else
      throw CLI::ValidationError("--task", "unknown task: " + task);
    std::string path = out_dir + "/render_" + task + "_" + std::to_string(index) + ".ppm";
    write_ppm(path, scene.height, scene.width, rgb);
    std::cout << "image written to " << path << "\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
