// dyolo command line: synth | pretrain-cfe | train | eval | detect | ablate | report
//
// Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dyolo/ablation.hpp"
#include "dyolo/plot.hpp"

#ifndef DYOLO_VERSION
#define DYOLO_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace dyolo;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<long> seed;
  std::string out;
  std::vector<std::string> overrides;
};

std::string keys_footer() {
  std::ostringstream s;
  s << "\nConfig keys (set in --config INI sections or with --override section.key=value):\n";
  for (const auto& k : config_schema()) {
    s << "  " << k.key << " (default '" << k.default_value << "')\n      " << k.help << "\n";
  }
  return s.str();
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "INI configuration file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "seed (data.seed for synth, train.seed otherwise)");
  sub->add_option("--out", c.out, "output directory for everything the command writes")->required();
  sub->add_option("--override", c.overrides, "override a config key: section.key=value (repeatable)");
  sub->footer(keys_footer());
}

ConfigTree resolve_config(const Common& c, const char* seed_key) {
  ConfigTree cfg = c.config.empty() ? ConfigTree{} : ConfigTree::from_ini(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.set(seed_key, std::to_string(*c.seed));
  return cfg;
}

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Excludes concurrent runs that share an output directory.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".dyolo.lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw IoError("output directory " + dir.string() + " is in use (lock file " + path_.string() + ")");
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) { /* advisory content only */ }
  }
  ~OutputLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  ConfigTree config;
  fs::path out;
  std::string seed;
  std::string started = iso_now();
  nlohmann::json extra = nlohmann::json::object();

  void write_manifest(int exit_code) const {
    nlohmann::json j{{"command", command},
                     {"argv", argv},
                     {"config", config.to_json()},
                     {"config_ini", config.to_ini()},
                     {"seed", seed},
                     {"version", DYOLO_VERSION},
                     {"out", fs::absolute(out).string()},
                     {"started", started},
                     {"finished", iso_now()},
                     {"exit_code", exit_code},
                     {"outputs", extra}};
    std::ofstream f(out / "run_manifest.json");
    f << j.dump(2) << "\n";
  }
};

fs::path data_root(const ConfigTree& cfg) {
  const auto& root = cfg.get("data.root");
  if (root.empty()) throw UsageError("no dataset given: pass --data or set data.root");
  return root;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

DYolo<float> model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("config")) throw ValidationError("checkpoint has no config snapshot");
  const auto cfg = ConfigTree::from_json(ckpt.meta.at("config"));
  Rng rng(0);
  DYolo<float> model(detector_config(cfg), rng);
  load_parameters(ckpt, model.inference_parameters());
  model.set_training(false);
  return model;
}

// ---------------------------------------------------------------------------

int cmd_synth(RunContext& ctx, std::optional<int> train, std::optional<int> test, bool rain) {
  if (train) ctx.config.set("data.train", std::to_string(*train));
  if (test) ctx.config.set("data.test", std::to_string(*test));
  if (rain) ctx.config.set("data.rain", "true");
  auto spec = dataset_spec(ctx.config, ctx.out);
  ctx.seed = ctx.config.get("data.seed");
  const auto m = build_dataset(spec);
  const auto hash = fnv1a(slurp(ctx.out / "manifest.tsv"));
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << hash;
  std::cout << "wrote " << m.rows.size() << " samples (" << m.split("train").size() << " train, "
            << m.split("test").size() << " test) to " << ctx.out.string() << "\n";
  if (m.dropped_boxes) std::cout << "dropped " << m.dropped_boxes << " boxes outside the kept classes\n";
  std::cout << "manifest fnv1a64 " << hex.str() << "\n";
  ctx.extra = {{"manifest", "manifest.tsv"}, {"rows", m.rows.size()}, {"manifest_fnv1a64", hex.str()}};
  return kOk;
}

int cmd_pretrain_cfe(RunContext& ctx) {
  ctx.seed = ctx.config.get("train.seed");
  const auto setup = train_setup(ctx.config);
  const auto data = load_dataset(data_root(ctx.config) / "manifest.tsv");
  auto teacher = pretrain_cfe(data.train, setup.model, setup.train, setup.train.cfe_epochs, &std::cout);
  const auto& eval_set = data.test.empty() ? data.train : data.test;
  const double trained = evaluate(teacher, eval_set, setup.train.val_conf_threshold, true).map;
  auto cfg = setup.model;
  cfg.dual_branch = cfg.use_cfe = cfg.use_fa = cfg.use_af = false;
  Rng rng(setup.train.seed ^ 0xcfe0cfe0cfe0ULL);
  DYolo<float> untrained(cfg, rng);
  const double baseline = evaluate(untrained, eval_set, setup.train.val_conf_threshold, true).map;
  std::cout << "clean-image mAP: pretrained " << trained << ", untrained " << baseline << "\n";

  Checkpoint ckpt;
  ckpt.meta = {{"format", "dyolo-checkpoint"},
               {"kind", "cfe"},
               {"config", setup.config_snapshot},
               {"cfe_epochs", setup.train.cfe_epochs},
               {"clean_map", trained},
               {"frozen", true}};
  ParameterList<float> backbone;
  teacher.backbone().collect(backbone, "backbone");
  add_parameters(ckpt, backbone);
  save_checkpoint(ctx.out / "cfe.ckpt", ckpt);
  ctx.extra = {{"checkpoint", "cfe.ckpt"}, {"clean_map", trained}, {"untrained_clean_map", baseline}};
  return kOk;
}

int cmd_train(RunContext& ctx, const std::string& resume, const std::string& cfe, std::optional<int> stop_after) {
  ctx.seed = ctx.config.get("train.seed");
  const auto setup = train_setup(ctx.config);
  const auto data = load_dataset(data_root(ctx.config) / "manifest.tsv");
  Trainer trainer(setup, data, ctx.out);
  if (!resume.empty()) {
    trainer.resume(resume);
    std::cout << "resumed at epoch " << trainer.next_epoch() << "\n";
  } else if (!cfe.empty()) {
    trainer.load_cfe(load_checkpoint(cfe));
  } else {
    trainer.pretrain_cfe(&std::cout);
  }
  trainer.run(stop_after, &std::cout);
  if (trainer.next_epoch() > 0) {
    save_checkpoint(ctx.out / "model.ckpt", trainer.training_checkpoint(trainer.next_epoch() - 1));
    save_checkpoint(ctx.out / "inference.ckpt", trainer.inference_checkpoint());
  }
  const double last = trainer.history().empty() ? 0.0 : trainer.history().back().val_map;
  std::cout << "final val mAP " << last << "\n";
  ctx.extra = {{"metrics", "metrics.tsv"},
               {"checkpoint", "model.ckpt"},
               {"inference_checkpoint", "inference.ckpt"},
               {"epochs_completed", trainer.next_epoch()},
               {"val_map", last}};
  return kOk;
}

void write_eval_outputs(RunContext& ctx, const EvalReport& report) {
  print_report(std::cout, report);
  std::ofstream txt(ctx.out / "report.txt");
  print_report(txt, report);
  std::ofstream tsv(ctx.out / "report.tsv");
  write_report_tsv(tsv, report);
  std::ofstream pr(ctx.out / "pr.tsv");
  pr << "class\trecall\tprecision\n" << std::setprecision(17);
  for (const auto& c : report.classes)
    for (std::size_t i = 0; i < c.recall.size(); ++i)
      pr << class_name(c.class_id) << '\t' << c.recall[i] << '\t' << c.precision[i] << '\n';
  ctx.extra = {{"report", "report.txt"}, {"report_tsv", "report.tsv"}, {"pr", "pr.tsv"}, {"map", report.map}};
}

// Detection rows: path, class, conf, xmin, ymin, xmax, ymax (tab separated,
// header line first). Images are keyed by file stem.
std::vector<ImageDetection> read_detections(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<ImageDetection> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string p, cls;
    Detection d;
    if (!std::getline(ss, p, '\t') || !std::getline(ss, cls, '\t') ||
        !(ss >> d.confidence >> d.box.xmin >> d.box.ymin >> d.box.xmax >> d.box.ymax)) {
      throw ValidationError("malformed detection row: " + line);
    }
    const auto id = class_id_from_name(cls);
    if (!id) throw ValidationError("unknown class in detections: " + cls);
    d.class_id = *id;
    out.push_back({fs::path(p).stem().string(), d});
  }
  return out;
}

int cmd_eval(RunContext& ctx, const std::string& checkpoint, const std::string& detections,
             const std::string& annotations, const std::string& split, bool clean, double iou_thr) {
  if (!checkpoint.empty()) {
    const auto ckpt = load_checkpoint(checkpoint);
    auto model = model_from_checkpoint(ckpt);
    const auto data = load_dataset(data_root(ctx.config) / "manifest.tsv");
    const auto& samples = split == "train" ? data.train : data.test;
    if (iou_thr != 0.5) throw ValidationError("eval --iou is only supported with --detections");
    write_eval_outputs(ctx, evaluate(model, samples, train_config(ctx.config).val_conf_threshold, clean));
    return kOk;
  }
  if (detections.empty() || annotations.empty()) {
    throw UsageError("eval needs --checkpoint (with --data) or --detections with --annotations");
  }
  std::vector<ImageGroundTruth> gts;
  for (const auto& e : fs::directory_iterator(annotations)) {
    if (e.path().extension() != ".xml") continue;
    for (const auto& g : read_voc(e.path()).objects) gts.push_back({e.path().stem().string(), g});
  }
  write_eval_outputs(ctx, mean_ap(read_detections(detections), gts, kClassCount, iou_thr));
  return kOk;
}

int cmd_detect(RunContext& ctx, const std::string& checkpoint, const std::vector<std::string>& inputs,
               double conf, double iou_thr) {
  const auto ckpt = load_checkpoint(checkpoint);
  auto model = model_from_checkpoint(ckpt);
  std::vector<fs::path> images;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".png") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      images.insert(images.end(), found.begin(), found.end());
    } else {
      images.push_back(in);
    }
  }
  std::ofstream out(ctx.out / "detections.tsv");
  out << "path\tclass\tconf\txmin\tymin\txmax\tymax\n" << std::setprecision(6);
  std::size_t rows = 0;
  for (const auto& p : images) {
    const auto img = read_png(p);
    if (img.width % 32 || img.height % 32) {
      throw ValidationError("detect: " + p.string() + " is " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + "; sizes must be multiples of 32");
    }
    const auto dets = model.detect(to_tensor<float>({&img}), DecodeOptions{.conf_threshold = conf, .iou_threshold = iou_thr});
    for (const auto& d : dets[0]) {
      out << p.string() << '\t' << class_name(d.class_id) << '\t' << d.confidence << '\t' << d.box.xmin << '\t'
          << d.box.ymin << '\t' << d.box.xmax << '\t' << d.box.ymax << '\n';
      ++rows;
    }
  }
  std::cout << "wrote " << rows << " detections for " << images.size() << " images\n";
  ctx.extra = {{"detections", "detections.tsv"}, {"rows", rows}, {"images", images.size()}};
  return kOk;
}

int cmd_ablate(RunContext& ctx, const std::vector<long>& seeds, const std::vector<std::string>& variants) {
  const auto data = load_dataset(data_root(ctx.config) / "manifest.tsv");
  std::vector<std::uint64_t> s(seeds.begin(), seeds.end());
  for (const auto& v : variants) DetectorConfig::ablation(v);
  ctx.seed = "";
  for (auto x : seeds) ctx.seed += (ctx.seed.empty() ? "" : ",") + std::to_string(x);
  const auto table = run_ablation(ctx.config, data, variants, s, ctx.out, &std::cout);
  std::ofstream f(ctx.out / "ablation.tsv");
  write_ablation_table(f, table);
  write_ablation_table(std::cout, table);
  ctx.extra = {{"table", "ablation.tsv"}};
  return kOk;
}

struct MetricsLog {
  std::vector<double> step, det, adapt, total, lambda2;
  std::vector<double> epoch, lr, val_map, epoch_det, epoch_adapt;
};

MetricsLog read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw ValidationError(path.string() + " is not a metrics log");
  MetricsLog m;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    while (f.size() < 10) f.emplace_back();
    auto num = [](const std::string& s) { return s.empty() ? std::nan("") : std::stod(s); };
    if (f[0] == "step") {
      m.step.push_back(num(f[2]));
      m.det.push_back(num(f[4]));
      m.adapt.push_back(num(f[5]));
      m.lambda2.push_back(num(f[7]));
      m.total.push_back(num(f[8]));
    } else if (f[0] == "epoch") {
      m.epoch.push_back(num(f[1]));
      m.lr.push_back(num(f[3]));
      m.epoch_det.push_back(num(f[4]));
      m.epoch_adapt.push_back(num(f[5]));
      m.val_map.push_back(num(f[9]));
    }
  }
  return m;
}

int cmd_report(RunContext& ctx, const std::vector<std::string>& metrics, const std::string& ablation,
               const std::string& pr) {
  if (metrics.empty() && ablation.empty() && pr.empty()) {
    throw UsageError("report needs --metrics, --ablation or --pr");
  }
  std::vector<std::string> written;
  if (!metrics.empty()) {
    std::vector<Series> loss, map, lr, lam;
    for (const auto& path : metrics) {
      const auto m = read_metrics(path);
      const std::string tag = fs::path(path).parent_path().filename().string();
      loss.push_back({tag + " L_d", m.step, m.det});
      loss.push_back({tag + " L_r", m.step, m.adapt});
      map.push_back({tag, m.epoch, m.val_map});
      lr.push_back({tag, m.epoch, m.lr});
      lam.push_back({tag, m.step, m.lambda2});
    }
    line_plot(ctx.out / "loss.svg", "Training losses", "step", "loss", loss);
    line_plot(ctx.out / "val_map.svg", "Validation mAP@0.5", "epoch", "mAP", map);
    line_plot(ctx.out / "lr.svg", "Learning rate", "epoch", "lr", lr);
    line_plot(ctx.out / "lambda2.svg", "Adaption loss weight", "step", "lambda2", lam);
    written.insert(written.end(), {"loss.svg", "val_map.svg", "lr.svg", "lambda2.svg"});
  }
  if (!ablation.empty()) {
    auto table = read_ablation_table(ablation);
    std::sort(table.rows.begin(), table.rows.end(),
              [](const AblationRow& a, const AblationRow& b) { return a.variant < b.variant; });
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& r : table.rows) {
      labels.push_back(r.variant);
      values.push_back(r.median);
    }
    bar_chart(ctx.out / "ablation.svg", "Median test mAP per configuration", "mAP", labels, values);
    written.push_back("ablation.svg");
  }
  if (!pr.empty()) {
    std::ifstream in(pr);
    if (!in) throw IoError("cannot read " + pr);
    std::string line;
    std::getline(in, line);
    std::map<std::string, Series> by_class;
    while (std::getline(in, line)) {
      std::istringstream ss(line);
      std::string cls;
      double r, p;
      if (!std::getline(ss, cls, '\t') || !(ss >> r >> p)) throw ValidationError("malformed PR row: " + line);
      auto& s = by_class[cls];
      s.label = cls;
      s.x.push_back(r);
      s.y.push_back(p);
    }
    std::vector<Series> series;
    for (auto& [k, s] : by_class) series.push_back(std::move(s));
    line_plot(ctx.out / "pr.svg", "Precision-recall", "recall", "precision", series);
    written.push_back("pr.svg");
  }
  for (const auto& w : written) std::cout << "wrote " << (ctx.out / w).string() << "\n";
  ctx.extra = {{"plots", written}};
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch foggy-weather detector: data synthesis, training, evaluation and inference"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("dyolo ") + DYOLO_VERSION);

  Common common;
  auto* synth = app.add_subcommand("synth", "generate a paired clean/hazy toy dataset with VOC annotations");
  add_common(synth, common);
  std::optional<int> n_train, n_test;
  bool rain = false;
  synth->add_option("--train", n_train, "training images (data.train)");
  synth->add_option("--test", n_test, "test images (data.test)");
  synth->add_flag("--rain", rain, "add rain streaks (data.rain)");

  std::string data;
  auto add_data = [&data](CLI::App* sub) {
    sub->add_option("--data", data, "dataset directory containing manifest.tsv (data.root)");
  };

  auto* pretrain = app.add_subcommand("pretrain-cfe", "train the clear-feature teacher on clean images");
  add_common(pretrain, common);
  add_data(pretrain);

  auto* train = app.add_subcommand("train", "two-phase training with per-epoch checkpoints");
  add_common(train, common);
  add_data(train);
  std::string resume, cfe, ablation_name;
  std::optional<int> stop_after;
  train->add_option("--ablation", ablation_name, "module combination V0..V6 (model.ablation)");
  train->add_option("--resume", resume, "continue from a training checkpoint")->check(CLI::ExistingFile);
  train->add_option("--cfe", cfe, "teacher checkpoint from pretrain-cfe (otherwise trained first)")
      ->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "stop once this many epochs are complete");

  auto* eval = app.add_subcommand("eval", "mAP@0.5 of a checkpoint, or of a detections file");
  add_common(eval, common);
  add_data(eval);
  std::string checkpoint, detections, annotations, split = "test";
  bool eval_clean = false;
  double eval_iou = 0.5;
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--split", split, "dataset split")->check(CLI::IsMember({"train", "test"}));
  eval->add_flag("--clean", eval_clean, "evaluate on clean instead of hazy images");
  eval->add_option("--detections", detections, "detections TSV as written by detect")->check(CLI::ExistingFile);
  eval->add_option("--annotations", annotations, "VOC XML directory matching --detections by file stem")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--iou", eval_iou, "IoU threshold (with --detections)")->check(CLI::Range(0.0, 1.0));

  auto* detect = app.add_subcommand("detect", "run a checkpoint on PNG images");
  add_common(detect, common);
  std::vector<std::string> inputs;
  double conf = 0.25, nms_iou = 0.5;
  detect->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  detect->add_option("--images", inputs, "PNG files or directories")->required()->check(CLI::ExistingPath);
  detect->add_option("--conf", conf, "score threshold")->check(CLI::Range(0.0, 1.0));
  detect->add_option("--nms-iou", nms_iou, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));

  auto* ablate = app.add_subcommand("ablate", "train configurations V0..V6 over seeds and rank them");
  add_common(ablate, common);
  add_data(ablate);
  std::vector<long> seeds{1, 2, 3};
  std::vector<std::string> variants(kAblationNames.begin(), kAblationNames.end());
  ablate->add_option("--seeds", seeds, "training seeds")->delimiter(',');
  ablate->add_option("--variants", variants, "configurations to run")->delimiter(',');

  auto* report = app.add_subcommand("report", "plot metrics logs, ablation tables and PR curves as SVG");
  add_common(report, common);
  std::vector<std::string> metrics;
  std::string ablation_table, pr_file;
  report->add_option("--metrics", metrics, "metrics.tsv from train (repeatable)")->check(CLI::ExistingFile);
  report->add_option("--ablation", ablation_table, "ablation.tsv from ablate")->check(CLI::ExistingFile);
  report->add_option("--pr", pr_file, "pr.tsv from eval")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  RunContext ctx;
  ctx.command = sub->get_name();
  ctx.argv.assign(argv, argv + argc);
  ctx.out = common.out;
  int code = kRuntime;
  try {
    ctx.config = resolve_config(common, sub == synth ? "data.seed" : "train.seed");
    if (!data.empty()) ctx.config.set("data.root", data);
    if (!ablation_name.empty()) ctx.config.set("model.ablation", ablation_name);
    OutputLock lock(ctx.out);
    try {
      if (sub == synth) code = cmd_synth(ctx, n_train, n_test, rain);
      else if (sub == pretrain) code = cmd_pretrain_cfe(ctx);
      else if (sub == train) code = cmd_train(ctx, resume, cfe, stop_after);
      else if (sub == eval) code = cmd_eval(ctx, checkpoint, detections, annotations, split, eval_clean, eval_iou);
      else if (sub == detect) code = cmd_detect(ctx, checkpoint, inputs, conf, nms_iou);
      else if (sub == ablate) code = cmd_ablate(ctx, seeds, variants);
      else code = cmd_report(ctx, metrics, ablation_table, pr_file);
    } catch (...) {
      ctx.write_manifest(kRuntime);
      throw;
    }
    ctx.write_manifest(code);
    return code;
  } catch (const UsageError& e) {
    std::cerr << "dyolo " << ctx.command << ": " << e.what() << "\n";
    return kUsage;
  } catch (const ValidationError& e) {
    std::cerr << "dyolo " << ctx.command << ": invalid input: " << e.what() << "\n";
    return kValidation;
  } catch (const InvalidArgument& e) {
    std::cerr << "dyolo " << ctx.command << ": invalid input: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "dyolo " << ctx.command << ": " << e.what() << "\n";
    return kRuntime;
  }
}
