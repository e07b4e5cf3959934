#pragma once
#include <string>
#include <vector>

#include "maskseg/config.hpp"
#include "maskseg/criterion.hpp"
#include "maskseg/metrics.hpp"
#include "maskseg/model.hpp"

namespace maskseg {

// AdamW with decoupled weight decay; slot ordering follows the parameter
// list, so updates are deterministic.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::vector<Param>& params, double lr, double weight_decay, double backbone_lr_mult);

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// One training-log line per step:
//   step=<n> lr=<v> total=<v> cls=<v;...> ce=<v;...> dice=<v;...>
// with one `;`-joined value per prediction set. Parse round-trips exactly.
struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double total = 0.0;
  std::vector<LayerLossBreakdown> layers;
};
std::string format_step_record(const StepRecord& rec);
StepRecord parse_step_record(const std::string& line);

struct TrainResult {
  std::string final_checkpoint;
  std::vector<std::string> decay_checkpoints;
  std::string log_path;
};

// Deterministic training run: AdamW, step-decayed lr, per-step loss logging,
// checkpoints at the decay points and at the end. Aborts on non-finite loss.
TrainResult train_model(const TrainConfig& cfg, const std::vector<GroundTruthScene>& dataset,
                        uint64_t seed, const std::string& out_dir);

struct EvalReport {
  std::string task;
  std::vector<std::pair<std::string, double>> values;
};

// task: "panoptic" (PQ family + AP over things + mIoU), "instance" (AP),
// "semantic" (mIoU). Runs the matching inference path on every scene.
EvalReport evaluate_task(const Model& model, const std::vector<GroundTruthScene>& scenes,
                         const std::string& task, const TrainConfig& cfg);
// Same metrics computed from externally supplied predictions (one final set per
// scene); lets tests drive the evaluators with oracle predictions.
EvalReport evaluate_outputs(const std::vector<SegmentPrediction>& preds,
                            const std::vector<GroundTruthScene>& scenes, const std::string& task,
                            const TrainConfig& cfg, const std::vector<bool>& is_thing_class,
                            int num_classes);
std::string format_report_table(const EvalReport& report);
void write_results_kv(const EvalReport& report, const std::string& path);

// Panoptic quality measured from each of the 3L+1 prediction sets.
std::vector<double> per_layer_pq(const Model& model, const std::vector<GroundTruthScene>& scenes,
                                 const TrainConfig& cfg);
// Class-agnostic AR@k of each prediction set's binarized masks (set 0 first).
std::vector<double> per_layer_ar(const Model& model, const std::vector<GroundTruthScene>& scenes,
                                 int k);

}  // namespace maskseg
