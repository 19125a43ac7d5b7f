#pragma once

// Two-phase training. Phase one optimises detection plus feature adaption
// jointly; from joint_phase_epochs on, the FA stacks are frozen and only the
// detection loss remains. SGD with momentum, per-epoch cosine learning rate.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyolo/checkpoint.hpp"
#include "dyolo/detector.hpp"
#include "dyolo/eval.hpp"
#include "dyolo/hazegen.hpp"

namespace dyolo {

enum class LambdaMode { fixed, dynamic };

inline const char* to_string(LambdaMode m) { return m == LambdaMode::fixed ? "fixed" : "dynamic"; }

inline LambdaMode lambda_mode_from_string(const std::string& s) {
  if (s == "fixed") return LambdaMode::fixed;
  if (s == "dynamic") return LambdaMode::dynamic;
  throw ValidationError("unknown lambda mode '" + s + "' (expected fixed|dynamic)");
}

struct TrainConfig {
  double lr0 = 0.01;
  double lr_floor = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grad_clip = 10.0;  // global L2 norm; 0 disables
  int epochs = 40;
  int batch = 8;
  int joint_phase_epochs = -1;  // -1: 30% of epochs
  double lambda_det = 1.0;
  LambdaMode lambda_mode = LambdaMode::dynamic;
  double lambda_adapt = 1.0;  // fixed mode
  double lambda2_init = 2.0;  // dynamic mode
  bool mosaic = false;
  std::uint64_t seed = 1;
  int cfe_epochs = 40;
  double val_conf_threshold = 0.01;

  int joint_epochs() const {
    return joint_phase_epochs >= 0 ? joint_phase_epochs : static_cast<int>(std::lround(0.3 * epochs));
  }

  void validate() const {
    if (!(lr0 > 0)) throw ValidationError("train.lr0 must be > 0");
    if (!(lr_floor >= 0 && lr_floor <= lr0)) throw ValidationError("train.lr_floor must lie in [0, lr0]");
    if (!(momentum >= 0 && momentum < 1)) throw ValidationError("train.momentum must lie in [0,1)");
    if (weight_decay < 0 || grad_clip < 0) throw ValidationError("train.weight_decay and train.grad_clip must be >= 0");
    if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
    if (batch < 1) throw ValidationError("train.batch must be >= 1");
    if (joint_epochs() > epochs) throw ValidationError("train.joint_phase_epochs must not exceed train.epochs");
    if (lambda_det < 0 || lambda_adapt < 0) throw ValidationError("train.lambda_det/lambda_adapt must be >= 0");
    if (lambda2_init < 1) throw ValidationError("train.lambda2_init must be >= 1");
    if (mosaic) throw ValidationError("train.mosaic: mosaic augmentation is not supported");
    if (cfe_epochs < 1) throw ValidationError("train.cfe_epochs must be >= 1");
  }
};

// Cosine annealing evaluated per epoch: lr0 at epoch 0, lr_floor at the last.
inline double cosine_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.epochs <= 1) return cfg.lr0;
  const double progress = static_cast<double>(epoch) / (cfg.epochs - 1);
  return cfg.lr_floor + (cfg.lr0 - cfg.lr_floor) * 0.5 * (1 + std::cos(M_PI * progress));
}

// Linear decay from lambda2_init at each epoch start toward 1.
inline double dynamic_weight(long step, int steps_per_epoch, double lambda2_init) {
  if (steps_per_epoch < 1) throw InvalidArgument("dynamic_weight: steps_per_epoch must be >= 1");
  const double pos = static_cast<double>(step % steps_per_epoch) / steps_per_epoch;
  return 1.0 + (lambda2_init - 1.0) * (1.0 - pos);
}

// lambda1 L_d + lambda2 L_r. An undefined L_r counts as zero.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& det, const Tensor<T>& adapt, double lambda1, double lambda2) {
  if (lambda1 < 0 || lambda2 < 0) throw InvalidArgument("total_loss: loss weights must be >= 0");
  auto out = scale(det, static_cast<T>(lambda1));
  if (adapt.defined()) out = add(out, scale(adapt, static_cast<T>(lambda2)));
  return out;
}

// ---------------------------------------------------------------------------
// Data

struct Sample {
  std::string key;
  ImagePlane clean;
  ImagePlane hazy;
  std::vector<GroundTruthBox> boxes;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  int width = 0;
  int height = 0;
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto manifest = read_manifest(manifest_path);
  Dataset ds;
  for (const auto& row : manifest.rows) {
    Sample s;
    s.key = row.hazy_path;
    if (!std::filesystem::exists(manifest.root / row.annotation_path)) {
      throw ValidationError("dataset: missing annotation " + row.annotation_path);
    }
    s.clean = read_png(manifest.root / row.clean_path);
    s.hazy = read_png(manifest.root / row.hazy_path);
    const auto ann = read_voc(manifest.root / row.annotation_path);
    if (!s.clean.same_size(s.hazy) || ann.width != s.clean.width || ann.height != s.clean.height) {
      throw ValidationError("dataset: image/annotation size mismatch for " + row.hazy_path);
    }
    if (ds.width == 0) {
      ds.width = s.clean.width;
      ds.height = s.clean.height;
    } else if (ds.width != s.clean.width || ds.height != s.clean.height) {
      throw ValidationError("dataset: mixed image sizes (" + row.hazy_path + ")");
    }
    s.boxes = ann.objects;
    (row.split == "test" ? ds.test : ds.train).push_back(std::move(s));
  }
  return ds;
}

template <typename T>
Tensor<T> batch_tensor(const std::vector<const Sample*>& batch, bool clean) {
  std::vector<const ImagePlane*> imgs;
  for (const auto* s : batch) imgs.push_back(clean ? &s->clean : &s->hazy);
  return to_tensor<T>(imgs);
}

// mAP of a model over samples (hazy images unless `clean`).
template <typename T>
EvalReport evaluate(DYolo<T>& model, const std::vector<Sample>& samples, double conf_threshold, bool clean = false,
                    int batch = 16) {
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<ImageDetection> dets;
  std::vector<ImageGroundTruth> gts;
  for (std::size_t i = 0; i < samples.size(); i += batch) {
    std::vector<const Sample*> chunk;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch); ++j) chunk.push_back(&samples[j]);
    const auto x = batch_tensor<T>(chunk, clean);
    const auto out = model.detect(x, DecodeOptions{.conf_threshold = conf_threshold});
    for (std::size_t j = 0; j < chunk.size(); ++j) {
      for (const auto& d : out[j]) dets.push_back({chunk[j]->key, d});
      for (const auto& g : chunk[j]->boxes) gts.push_back({chunk[j]->key, g});
    }
  }
  model.set_training(was_training);
  return mean_ap(dets, gts, model.config().class_count);
}

// ---------------------------------------------------------------------------
// Optimiser

template <typename T>
class Sgd {
 public:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> velocity;
    bool decay;
  };

  // Parameters that do not require gradients at construction (the CFE) are
  // excluded for good; parameters frozen later are skipped at step time.
  Sgd(const ParameterList<T>& params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params) {
      if (!p.tensor.requires_grad()) continue;
      const bool is_bias = p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0;
      slots_.push_back({p.name, p.tensor, std::vector<T>(p.tensor.numel(), T(0)), !is_bias});
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  // Returns the pre-clipping global gradient norm.
  double step(double lr, double clip) {
    double sq = 0;
    for (const auto& s : slots_) {
      if (!s.param.requires_grad()) continue;
      for (T g : s.param.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    const double factor = clip > 0 && norm > clip ? clip / norm : 1.0;
    for (auto& s : slots_) {
      if (!s.param.requires_grad()) continue;
      auto w = s.param.mutable_data();
      const auto g = s.param.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        double grad = g.empty() ? 0.0 : static_cast<double>(g[i]) * factor;
        if (s.decay) grad += weight_decay_ * w[i];
        s.velocity[i] = static_cast<T>(momentum_ * s.velocity[i] + grad);
        w[i] = static_cast<T>(w[i] - lr * s.velocity[i]);
      }
    }
    return norm;
  }

  std::vector<Slot>& slots() { return slots_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Slot> slots_;
};

inline void freeze(const ParameterList<float>& params) {
  for (const auto& p : params) Tensor<float>(p.tensor).set_requires_grad(false);
}

// ---------------------------------------------------------------------------

struct TrainSetup {
  DetectorConfig model;
  AdaptionLossConfig adaption;
  TrainConfig train;
  nlohmann::json config_snapshot = nlohmann::json::object();
};

struct StepRecord {
  int epoch = 0;
  long step = 0;
  double lr = 0;
  double det_loss = 0;
  double adapt_loss = 0;
  double lambda1 = 0;
  double lambda2 = 0;
  double total = 0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double det_loss = 0;  // means over the epoch's steps
  double adapt_loss = 0;
  double total = 0;
  double val_map = 0;
  int phase = 1;
};

inline constexpr const char* kMetricsHeader = "kind\tepoch\tstep\tlr\tL_d\tL_r\tlambda1\tlambda2\ttotal\tval_mAP";

// One pass of detection-only training on clean images for the clear-feature
// teacher: a plain single-branch copy of the detector.
inline DYolo<float> pretrain_cfe(const std::vector<Sample>& clean_train, const DetectorConfig& model_cfg,
                                 const TrainConfig& tc, int epochs, std::ostream* log = nullptr) {
  if (clean_train.empty()) throw ValidationError("pretrain_cfe: clean dataset is empty");
  auto cfg = model_cfg;
  cfg.dual_branch = cfg.use_cfe = cfg.use_fa = cfg.use_af = false;
  Rng rng(tc.seed ^ 0xcfe0cfe0cfe0ULL);
  DYolo<float> teacher(cfg, rng);
  teacher.set_distilling(false);
  Sgd<float> opt(teacher.parameters(), tc.momentum, tc.weight_decay);
  TrainConfig sched = tc;
  sched.epochs = epochs;
  const int w = clean_train[0].clean.width, h = clean_train[0].clean.height;
  std::vector<std::size_t> order(clean_train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cosine_lr(sched, e);
    double sum = 0;
    int steps = 0;
    for (std::size_t i = 0; i < order.size(); i += tc.batch) {
      std::vector<const Sample*> batch;
      std::vector<std::vector<GroundTruthBox>> targets;
      for (std::size_t j = i; j < std::min(order.size(), i + tc.batch); ++j) {
        batch.push_back(&clean_train[order[j]]);
        targets.push_back(clean_train[order[j]].boxes);
      }
      const auto out = teacher.forward(batch_tensor<float>(batch, true));
      const auto loss = detection_loss(out.head, targets, w, h);
      opt.zero_grad();
      loss.backward();
      opt.step(lr, tc.grad_clip);
      sum += loss.item();
      ++steps;
    }
    if (log) *log << "pretrain-cfe epoch " << e << " lr " << lr << " L_d " << sum / steps << "\n";
  }
  freeze(teacher.parameters());
  teacher.set_training(false);
  return teacher;
}

class Trainer {
 public:
  Trainer(TrainSetup setup, const Dataset& data, std::filesystem::path out_dir)
      : setup_(std::move(setup)), data_(data), out_dir_(std::move(out_dir)), rng_(setup_.train.seed),
        model_(setup_.model, rng_) {
    setup_.train.validate();
    setup_.adaption.validate();
    if (data_.train.empty()) throw ValidationError("train: training split is empty");
    for (const auto* split : {&data_.train, &data_.test})
      for (const auto& s : *split)
        for (const auto& b : s.boxes)
          if (b.class_id >= setup_.model.class_count) {
            throw ValidationError("train: annotation class " + class_name(b.class_id) + " outside model classes");
          }
    optimizer_.emplace(model_.parameters(), setup_.train.momentum, setup_.train.weight_decay);
  }

  DYolo<float>& model() { return model_; }
  const TrainSetup& setup() const { return setup_; }
  int next_epoch() const { return next_epoch_; }
  const std::vector<EpochRecord>& history() const { return history_; }

  int steps_per_epoch() const {
    const int n = static_cast<int>(data_.train.size());
    return (n + setup_.train.batch - 1) / setup_.train.batch;
  }

  void pretrain_cfe(std::ostream* log = nullptr) {
    if (!setup_.model.use_cfe) return;
    auto teacher = dyolo::pretrain_cfe(data_.train, setup_.model, setup_.train, setup_.train.cfe_epochs, log);
    model_.load_cfe_backbone(teacher.backbone());
  }

  // Uses a teacher saved by the pretrain-cfe command.
  void load_cfe(const Checkpoint& teacher_ckpt) {
    if (!setup_.model.use_cfe) return;
    if (teacher_ckpt.meta.value("kind", "") != "cfe") throw StateError("load_cfe: not a CFE teacher checkpoint");
    auto cfg = setup_.model;
    cfg.dual_branch = cfg.use_cfe = cfg.use_fa = cfg.use_af = false;
    Rng unused(0);
    Backbone<float> backbone(cfg, unused);
    ParameterList<float> ps;
    backbone.collect(ps, "backbone");
    load_parameters(teacher_ckpt, ps);
    model_.load_cfe_backbone(backbone);
  }

  // Restores parameters, momentum, RNG and epoch counter. The stored config
  // snapshot must equal the current one.
  void resume(const std::filesystem::path& path) {
    const auto ckpt = load_checkpoint(path);
    if (ckpt.meta.value("kind", "") != "training") throw StateError("resume: " + path.string() + " is not a training checkpoint");
    const auto& stored = ckpt.meta.at("config");
    if (stored != setup_.config_snapshot) {
      std::string diff;
      for (const auto& [k, v] : setup_.config_snapshot.items())
        if (!stored.contains(k) || stored.at(k) != v) diff += " " + k;
      for (const auto& [k, v] : stored.items())
        if (!setup_.config_snapshot.contains(k)) diff += " " + k;
      throw StateError("resume: checkpoint config differs in:" + diff);
    }
    load_parameters(ckpt, model_.parameters());
    for (auto& s : optimizer_->slots()) {
      auto it = ckpt.momentum.find(s.name);
      if (it == ckpt.momentum.end()) throw StateError("resume: no momentum buffer for " + s.name);
      s.velocity = it->second.data;
    }
    std::istringstream(ckpt.meta.at("rng").get<std::string>()) >> rng_;
    next_epoch_ = ckpt.meta.at("epoch").get<int>() + 1;
    model_.mark_cfe_pretrained(ckpt.meta.value("cfe_pretrained", false));
    if (next_epoch_ >= setup_.train.joint_epochs()) enter_phase_two();
  }

  // Runs epochs [next_epoch, stop) where stop defaults to the configured total.
  void run(std::optional<int> stop_after = std::nullopt, std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir_ / "checkpoints");
    const auto metrics_path = out_dir_ / "metrics.tsv";
    const bool fresh = !fs::exists(metrics_path);
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("train: cannot open " + metrics_path.string());
    if (fresh) metrics << kMetricsHeader << "\n";
    metrics << std::setprecision(17);

    const auto& tc = setup_.train;
    const int stop = stop_after ? std::min(*stop_after, tc.epochs) : tc.epochs;
    const int spe = steps_per_epoch();
    std::vector<std::size_t> order(data_.train.size());
    for (int epoch = next_epoch_; epoch < stop; ++epoch) {
      if (epoch >= tc.joint_epochs()) enter_phase_two();
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng_);
      const double lr = cosine_lr(tc, epoch);
      EpochRecord rec;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.phase = phase_;
      for (int s = 0; s < spe; ++s) {
        const auto r = train_step(order, epoch, s, lr);
        metrics << "step\t" << epoch << '\t' << r.step << '\t' << lr << '\t' << r.det_loss << '\t' << r.adapt_loss
                << '\t' << r.lambda1 << '\t' << r.lambda2 << '\t' << r.total << "\t\n";
        rec.det_loss += r.det_loss / spe;
        rec.adapt_loss += r.adapt_loss / spe;
        rec.total += r.total / spe;
      }
      rec.val_map = data_.test.empty() ? 0.0 : evaluate(model_, data_.test, tc.val_conf_threshold).map;
      metrics << "epoch\t" << epoch << '\t' << static_cast<long>(epoch + 1) * spe - 1 << '\t' << lr << '\t'
              << rec.det_loss << '\t' << rec.adapt_loss << '\t' << tc.lambda_det << "\t\t" << rec.total << '\t'
              << rec.val_map << "\n";
      metrics.flush();
      history_.push_back(rec);
      next_epoch_ = epoch + 1;
      save_checkpoint(epoch_checkpoint_path(epoch), training_checkpoint(epoch));
      if (log) {
        *log << "epoch " << epoch << " phase " << phase_ << " lr " << lr << " L_d " << rec.det_loss << " L_r "
             << rec.adapt_loss << " val_mAP " << rec.val_map << std::endl;
      }
    }
  }

  std::filesystem::path epoch_checkpoint_path(int epoch) const {
    std::ostringstream name;
    name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
    return out_dir_ / "checkpoints" / name.str();
  }

  Checkpoint training_checkpoint(int epoch) const {
    Checkpoint c = base_checkpoint("training", epoch);
    add_parameters(c, model_.parameters());
    for (auto& s : const_cast<Sgd<float>&>(*optimizer_).slots()) {
      c.momentum[s.name] = TensorRecord{s.param.shape(), false, s.velocity};
    }
    return c;
  }

  // Detector weights only: no CFE, no optimizer state.
  Checkpoint inference_checkpoint() const {
    Checkpoint c = base_checkpoint("inference", next_epoch_ - 1);
    add_parameters(c, model_.inference_parameters());
    return c;
  }

 private:
  Checkpoint base_checkpoint(const char* kind, int epoch) const {
    Checkpoint c;
    std::ostringstream rng_state;
    rng_state << rng_;
    c.meta = {{"format", "dyolo-checkpoint"},
              {"kind", kind},
              {"config", setup_.config_snapshot},
              {"epoch", epoch},
              {"phase", phase_},
              {"rng", rng_state.str()},
              {"cfe_pretrained", model_.cfe_pretrained()}};
    return c;
  }

  void enter_phase_two() {
    if (phase_ == 2) return;
    phase_ = 2;
    ParameterList<float> fa;
    for (const auto& p : model_.parameters())
      if (DYolo<float>::is_fa_parameter(p.name)) fa.push_back(p);
    freeze(fa);
    model_.set_distilling(false);
  }

  StepRecord train_step(const std::vector<std::size_t>& order, int epoch, int s, double lr) {
    const auto& tc = setup_.train;
    std::vector<const Sample*> batch;
    std::vector<std::vector<GroundTruthBox>> targets;
    const std::size_t begin = static_cast<std::size_t>(s) * tc.batch;
    for (std::size_t j = begin; j < std::min(order.size(), begin + tc.batch); ++j) {
      batch.push_back(&data_.train[order[j]]);
      targets.push_back(data_.train[order[j]].boxes);
    }
    const auto hazy = batch_tensor<float>(batch, false);
    const bool distill = phase_ == 1 && setup_.model.use_cfe;
    Tensor<float> clean;
    if (distill) clean = batch_tensor<float>(batch, true);
    const auto out = model_.forward(hazy, distill ? &clean : nullptr);
    const auto det = detection_loss(out.head, targets, data_.width, data_.height);
    const auto adapt = distill ? model_.adaption_loss(out, setup_.adaption) : Tensor<float>{};

    StepRecord r;
    r.epoch = epoch;
    r.step = static_cast<long>(epoch) * steps_per_epoch() + s;
    r.lr = lr;
    r.lambda1 = tc.lambda_det;
    r.lambda2 = !distill                              ? 0.0
                : tc.lambda_mode == LambdaMode::fixed ? tc.lambda_adapt
                                                      : dynamic_weight(r.step, steps_per_epoch(), tc.lambda2_init);
    r.det_loss = det.item();
    r.adapt_loss = adapt.defined() ? adapt.item() : 0.0;
    r.total = r.lambda1 * r.det_loss + r.lambda2 * r.adapt_loss;
    const auto total = total_loss(det, adapt, r.lambda1, r.lambda2);
    optimizer_->zero_grad();
    total.backward();
    optimizer_->step(lr, tc.grad_clip);
    return r;
  }

  TrainSetup setup_;
  const Dataset& data_;
  std::filesystem::path out_dir_;
  Rng rng_;
  DYolo<float> model_;
  std::optional<Sgd<float>> optimizer_;
  int next_epoch_ = 0;
  int phase_ = 1;
  std::vector<EpochRecord> history_;
};

}  // namespace dyolo
