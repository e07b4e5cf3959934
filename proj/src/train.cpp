#include "maskseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "maskseg/kernels.hpp"

namespace maskseg {

namespace {

// Shortest decimal form that round-trips a double.
std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = std::strtod(buf, nullptr);
  if (back == v) {
    for (int prec = 1; prec <= 16; ++prec) {
      char shorter[32];
      std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
      if (std::strtod(shorter, nullptr) == v) return shorter;
    }
  }
  return buf;
}

std::vector<double> split_values(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ';')) out.push_back(std::strtod(tok.c_str(), nullptr));
  return out;
}

}  // namespace

AdamW::AdamW(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(std::vector<Param>& params, double lr, double weight_decay,
                 double backbone_lr_mult) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value.size(), 0.0);
      v_[i].assign(params[i].value.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter set changed");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    double lr_p = p.backbone ? lr * backbone_lr_mult : lr;
    std::vector<double> g = p.value.grad();
    double* pv = p.value.data();
    for (size_t j = 0; j < g.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      pv[j] -= lr_p * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * pv[j]);
    }
  }
}

std::string format_step_record(const StepRecord& rec) {
  std::ostringstream os;
  os << "step=" << rec.step << " lr=" << fmt_double(rec.lr) << " total=" << fmt_double(rec.total);
  auto join = [&](const char* name, auto get) {
    os << " " << name << "=";
    for (size_t i = 0; i < rec.layers.size(); ++i) {
      if (i) os << ";";
      os << fmt_double(get(rec.layers[i]));
    }
  };
  join("cls", [](const LayerLossBreakdown& b) { return b.cls; });
  join("ce", [](const LayerLossBreakdown& b) { return b.ce; });
  join("dice", [](const LayerLossBreakdown& b) { return b.dice; });
  return os.str();
}

StepRecord parse_step_record(const std::string& line) {
  StepRecord rec;
  std::istringstream is(line);
  std::string tok;
  std::vector<double> cls, ce, dice;
  while (is >> tok) {
    size_t eq = tok.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("step record: malformed field: " + tok);
    std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
    if (key == "step") rec.step = std::stoi(value);
    else if (key == "lr") rec.lr = std::strtod(value.c_str(), nullptr);
    else if (key == "total") rec.total = std::strtod(value.c_str(), nullptr);
    else if (key == "cls") cls = split_values(value);
    else if (key == "ce") ce = split_values(value);
    else if (key == "dice") dice = split_values(value);
    else throw std::invalid_argument("step record: unknown field: " + key);
  }
  if (cls.size() != ce.size() || cls.size() != dice.size())
    throw std::invalid_argument("step record: inconsistent layer counts");
  rec.layers.resize(cls.size());
  for (size_t i = 0; i < cls.size(); ++i) rec.layers[i] = {cls[i], ce[i], dice[i]};
  return rec;
}

TrainResult train_model(const TrainConfig& cfg, const std::vector<GroundTruthScene>& dataset,
                        uint64_t seed, const std::string& out_dir) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  std::filesystem::create_directories(out_dir);

  Rng root(seed);
  Rng init_rng = root.split(0);
  Model model(cfg.model, init_rng);
  AdamW opt;

  TrainResult result;
  result.log_path = out_dir + "/train_log.txt";
  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot open log: " + result.log_path);

  int t1 = static_cast<int>(cfg.decay1 * cfg.steps);
  int t2 = static_cast<int>(cfg.decay2 * cfg.steps);
  int sets = cfg.model.decoder_layers() + 1;
  bool supervise0 = cfg.model.supervise_layer0();

  for (int step = 0; step < cfg.steps; ++step) {
    double lr = lr_at_step(cfg, step);
    Rng step_rng = root.split(1).split(step);
    Rng batch_rng = step_rng.split(0);
    std::vector<int> batch(cfg.batch_size);
    for (int& b : batch) b = batch_rng.uniform_int(static_cast<int>(dataset.size()));

    for (auto& p : model.params()) p.value.zero_grad();
    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.layers.assign(sets, {});
    double inv_b = 1.0 / cfg.batch_size;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const GroundTruthScene& scene = dataset[batch[b]];
      Tape tape;
      ForwardOptions opts;
      Rng drop_rng = step_rng.split(100 + b);
      opts.training = true;
      if (cfg.model.dropout > 0.0) opts.dropout_rng = &drop_rng;
      ForwardResult fwd = model.forward(scene.image, opts);
      TotalLossResult lr_loss = total_loss(fwd.predictions, scene, cfg.weights, cfg.points,
                                           step_rng.split(200 + b), supervise0, !cfg.point_loss);
      rec.total += lr_loss.loss.value() * inv_b;
      for (int s = 0; s < sets; ++s) {
        rec.layers[s].cls += lr_loss.per_layer[s].cls * inv_b;
        rec.layers[s].ce += lr_loss.per_layer[s].ce * inv_b;
        rec.layers[s].dice += lr_loss.per_layer[s].dice * inv_b;
      }
      tape.backward(scale(lr_loss.loss, inv_b));
    }
    if (!std::isfinite(rec.total))
      throw std::runtime_error("train: loss diverged (non-finite) at step " + std::to_string(step));
    opt.step(model.params(), lr, cfg.weight_decay, cfg.backbone_lr_mult);
    log << format_step_record(rec) << "\n";

    int done = step + 1;
    if (done == t1 || done == t2) {
      std::string path = out_dir + "/ckpt_step" + std::to_string(done) + ".bin";
      model.save(path);
      result.decay_checkpoints.push_back(path);
    }
  }
  log.flush();
  result.final_checkpoint = out_dir + "/ckpt_final.bin";
  model.save(result.final_checkpoint);
  return result;
}

namespace {

std::vector<Proposal> proposals_from_prediction(const SegmentPrediction& pred, int out_h,
                                                int out_w, double mask_threshold) {
  int n = pred.class_logits.dim(0), nc = pred.class_logits.dim(1);
  std::vector<double> probs(pred.class_logits.size());
  kernels::softmax_rows(pred.class_logits.data(), probs.data(), n, nc, kMaskSentinel);
  std::vector<double> up(static_cast<size_t>(n) * out_h * out_w);
  kernels::bilinear_resize(pred.mask_logits.data(), up.data(), n, pred.mask_h, pred.mask_w,
                           out_h, out_w);
  kernels::sigmoid(up.data(), up.data(), up.size());
  std::vector<Proposal> out(n);
  size_t hw = static_cast<size_t>(out_h) * out_w;
  for (int i = 0; i < n; ++i) {
    out[i].mask = BinaryMask(out_h, out_w);
    const double* mi = up.data() + static_cast<size_t>(i) * hw;
    for (size_t p = 0; p < hw; ++p) out[i].mask.v[p] = mi[p] > mask_threshold;
    out[i].score = 1.0 - probs[static_cast<size_t>(i) * nc + nc - 1];  // objectness
  }
  return out;
}

}  // namespace

EvalReport evaluate_task(const Model& model, const std::vector<GroundTruthScene>& scenes,
                         const std::string& task, const TrainConfig& cfg) {
  std::vector<SegmentPrediction> preds;
  preds.reserve(scenes.size());
  for (const auto& scene : scenes) preds.push_back(model.forward(scene.image).predictions.back());
  return evaluate_outputs(preds, scenes, task, cfg, model.config().is_thing_class(),
                          model.config().num_classes);
}

EvalReport evaluate_outputs(const std::vector<SegmentPrediction>& preds,
                            const std::vector<GroundTruthScene>& scenes, const std::string& task,
                            const TrainConfig& cfg, const std::vector<bool>& things,
                            int num_classes) {
  if (task != "panoptic" && task != "instance" && task != "semantic")
    throw std::invalid_argument("evaluate: unknown task: " + task);
  if (preds.size() != scenes.size())
    throw std::invalid_argument("evaluate: one prediction set per scene required");

  std::vector<PanopticOutput> pan;
  std::vector<InstanceOutput> inst;
  std::vector<std::vector<GtSegment>> thing_gts;
  std::vector<std::vector<int>> sem_pred, sem_gt;

  for (size_t i = 0; i < scenes.size(); ++i) {
    const GroundTruthScene& scene = scenes[i];
    const SegmentPrediction& pred = preds[i];
    if (task == "panoptic" || task == "instance") {
      InstanceOutput dets = instance_inference(pred, scene.height, scene.width, things,
                                               cfg.eval_top_k, cfg.model.mask_threshold);
      inst.push_back(std::move(dets));
      std::vector<GtSegment> tg;
      for (const auto& s : scene.segments)
        if (s.is_thing) tg.push_back(s);
      thing_gts.push_back(std::move(tg));
    }
    if (task == "panoptic")
      pan.push_back(panoptic_inference(pred, scene.height, scene.width, things, cfg.panoptic));
    if (task == "panoptic" || task == "semantic") {
      sem_pred.push_back(semantic_inference(pred, scene.height, scene.width));
      sem_gt.push_back(semantic_labels_from_scene(scene));
    }
  }

  EvalReport report;
  report.task = task;
  if (task == "panoptic") {
    PqResult r = pq_metric_dataset(pan, scenes, things);
    report.values = {{"pq", r.pq},
                     {"sq", r.sq},
                     {"rq", r.rq},
                     {"pq_things", r.pq_things},
                     {"pq_stuff", r.pq_stuff},
                     {"ap_thing_pan", ap_metric(inst, thing_gts, default_iou_thresholds(), num_classes)},
                     {"miou_pan", miou_metric_dataset(sem_pred, sem_gt, num_classes)}};
  } else if (task == "instance") {
    report.values = {{"ap", ap_metric(inst, thing_gts, default_iou_thresholds(), num_classes)}};
  } else {
    report.values = {{"miou", miou_metric_dataset(sem_pred, sem_gt, num_classes)}};
  }
  return report;
}

std::string format_report_table(const EvalReport& report) {
  std::ostringstream head, row;
  head << "task";
  row << report.task;
  for (const auto& [k, v] : report.values) {
    head << " " << k;
    row << " " << fmt_double(v);
  }
  return head.str() + "\n" + row.str() + "\n";
}

void write_results_kv(const EvalReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("results: cannot open for write: " + path);
  f << "task = " << report.task << "\n";
  for (const auto& [k, v] : report.values) f << k << " = " << fmt_double(v) << "\n";
}

std::vector<double> per_layer_pq(const Model& model, const std::vector<GroundTruthScene>& scenes,
                                 const TrainConfig& cfg) {
  std::vector<bool> things = model.config().is_thing_class();
  int sets = model.config().decoder_layers() + 1;
  std::vector<std::vector<PanopticOutput>> outs(sets);
  for (const auto& scene : scenes) {
    ForwardResult fwd = model.forward(scene.image);
    for (int s = 0; s < sets; ++s)
      outs[s].push_back(panoptic_inference(fwd.predictions[s], scene.height, scene.width, things,
                                           cfg.panoptic));
  }
  std::vector<double> pq(sets);
  for (int s = 0; s < sets; ++s) pq[s] = pq_metric_dataset(outs[s], scenes, things).pq;
  return pq;
}

std::vector<double> per_layer_ar(const Model& model, const std::vector<GroundTruthScene>& scenes,
                                 int k) {
  int sets = model.config().decoder_layers() + 1;
  std::vector<std::vector<std::vector<Proposal>>> props(sets);
  std::vector<std::vector<GtSegment>> gts;
  for (const auto& scene : scenes) {
    ForwardResult fwd = model.forward(scene.image);
    for (int s = 0; s < sets; ++s)
      props[s].push_back(proposals_from_prediction(fwd.predictions[s], scene.height, scene.width,
                                                   model.config().mask_threshold));
    gts.push_back(scene.segments);
  }
  std::vector<double> ar(sets);
  for (int s = 0; s < sets; ++s) ar[s] = ar_at_k(props[s], gts, k);
  return ar;
}

}  // namespace maskseg
