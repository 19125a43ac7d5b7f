#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dyolo/config.hpp"

using namespace dyolo;
using Catch::Approx;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dyolo_test_" + name);
  fs::remove_all(p);
  return p;
}

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    DatasetSpec spec;
    spec.out_dir = scratch("train_ds");
    spec.train = 24;
    spec.test = 8;
    build_dataset(spec);
    return load_dataset(spec.out_dir / "manifest.tsv");
  }();
  return ds;
}

ConfigTree small_config(const std::string& ablation, int epochs) {
  ConfigTree c;
  c.set("model.ablation", ablation);
  c.set("train.epochs", std::to_string(epochs));
  c.set("train.joint_phase_epochs", "1");
  c.set("train.cfe_epochs", "1");
  return c;
}

std::map<std::string, std::vector<float>> values_of(const Checkpoint& c, bool (*pick)(const std::string&)) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& [name, t] : c.parameters)
    if (pick(name)) out[name] = t.data;
  return out;
}

}  // namespace

TEST_CASE("cosine learning rate") {
  TrainConfig tc;
  CHECK(cosine_lr(tc, 0) == Approx(0.01).margin(1e-12));
  CHECK(cosine_lr(tc, tc.epochs - 1) == Approx(1e-4).margin(1e-12));
  for (int e = 1; e < tc.epochs; ++e) CHECK(cosine_lr(tc, e) < cosine_lr(tc, e - 1));
}

TEST_CASE("dynamic adaption weight") {
  CHECK(dynamic_weight(0, 10, 2.0) == 2.0);
  CHECK(dynamic_weight(5, 10, 2.0) == Approx(1.5));
  CHECK(dynamic_weight(10, 10, 2.0) == 2.0);
  CHECK(dynamic_weight(19, 10, 2.0) == Approx(1.1));
  for (long s = 1; s < 10; ++s) CHECK(dynamic_weight(s, 10, 3.0) <= dynamic_weight(s - 1, 10, 3.0));
  CHECK_THROWS_AS(dynamic_weight(0, 0, 2.0), InvalidArgument);
}

TEST_CASE("total loss weighting") {
  const auto d = Tensor<double>::scalar(3.0);
  const auto r = Tensor<double>::scalar(0.5);
  CHECK(total_loss(d, r, 1.0, 2.0).item() == Approx(4.0));
  CHECK(total_loss(d, Tensor<double>{}, 1.0, 2.0).item() == Approx(3.0));
  CHECK_THROWS_AS(total_loss(d, r, -1.0, 1.0), InvalidArgument);
}

TEST_CASE("config parsing and overrides") {
  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "a.cfg");
    f << "[train]\nepochs = 12\nlambda_mode = fixed\n\n[model]\nablation = V3\n";
  }
  auto c = ConfigTree::from_ini(dir / "a.cfg");
  CHECK(train_config(c).epochs == 12);
  CHECK(train_config(c).lambda_mode == LambdaMode::fixed);
  CHECK(detector_config(c).use_cfe);
  CHECK_FALSE(detector_config(c).dual_branch);
  c.apply_override("train.epochs=5");
  CHECK(train_config(c).epochs == 5);
  CHECK(train_config(c).joint_epochs() == 2);

  CHECK_THROWS_AS(c.apply_override("train.nope=1"), ValidationError);
  CHECK_THROWS_AS(c.apply_override("train.epochs"), ValidationError);
  c.set("train.batch", "eight");
  CHECK_THROWS_AS(train_config(c), ValidationError);
  c.set("train.batch", "8");
  c.set("model.ablation", "V9");
  CHECK_THROWS_AS(detector_config(c), ValidationError);
  c.set("model.ablation", "custom");
  c.set("model.use_fa", "false");
  CHECK_THROWS_AS(detector_config(c), ValidationError);

  {
    std::ofstream f(dir / "b.cfg");
    f << "[data]\nunknown = 1\n";
  }
  CHECK_THROWS_AS(ConfigTree::from_ini(dir / "b.cfg"), ValidationError);

  // INI and JSON forms round-trip.
  ConfigTree d;
  d.set("adaption.tau", "2.5");
  {
    std::ofstream f(dir / "c.cfg");
    f << d.to_ini();
  }
  CHECK(ConfigTree::from_ini(dir / "c.cfg").to_json() == d.to_json());
  CHECK(ConfigTree::from_json(d.to_json()).to_json() == d.to_json());

  // Data locations stay out of the snapshot.
  d.set("data.root", "/somewhere");
  CHECK_FALSE(train_setup(d).config_snapshot.contains("data.root"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = scratch("ckpt");
  fs::create_directories(dir);
  Rng rng(3);
  DYolo<float> model(DetectorConfig::ablation("V5"), rng);
  Checkpoint c;
  c.meta = {{"kind", "inference"}, {"epoch", 4}};
  add_parameters(c, model.inference_parameters());
  c.momentum["x"] = TensorRecord{Shape{2, 3}, false, {1, 2, 3, 4, 5, 6}};
  save_checkpoint(dir / "m.ckpt", c);
  const auto back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.meta == c.meta);
  CHECK(back.parameter_count() == c.parameter_count());
  for (const auto& [name, t] : c.parameters) CHECK(back.parameters.at(name).data == t.data);
  CHECK(back.momentum.at("x").data == c.momentum.at("x").data);

  Rng other(9);
  DYolo<float> fresh(DetectorConfig::ablation("V5"), other);
  load_parameters(back, fresh.inference_parameters());
  CHECK(fresh.inference_parameters().front().tensor.data()[0] == model.inference_parameters().front().tensor.data()[0]);

  auto narrow = DetectorConfig::ablation("V0");
  narrow.channels = {16, 32, 64};
  DYolo<float> wrong(narrow, other);
  CHECK_THROWS_AS(load_parameters(back, wrong.parameters()), StateError);

  {
    std::ofstream f(dir / "bad.ckpt", std::ios::binary);
    f << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("CFE pretraining rejects an empty dataset") {
  CHECK_THROWS_AS(pretrain_cfe({}, DetectorConfig::ablation("V5"), TrainConfig{}, 1), ValidationError);
}

TEST_CASE("two-phase protocol: FA frozen after the joint phase, losses logged consistently") {
  const auto out = scratch("protocol");
  auto setup = train_setup(small_config("V5", 3));
  Trainer trainer(setup, small_dataset(), out);
  trainer.pretrain_cfe();
  Checkpoint initial;
  add_parameters(initial, trainer.model().parameters());
  trainer.run();

  const auto e1 = load_checkpoint(trainer.epoch_checkpoint_path(1));
  const auto e2 = load_checkpoint(trainer.epoch_checkpoint_path(2));
  const auto fa1 = values_of(e1, &DYolo<float>::is_fa_parameter);
  REQUIRE_FALSE(fa1.empty());
  CHECK(fa1 == values_of(e2, &DYolo<float>::is_fa_parameter));
  // The detector keeps learning.
  CHECK(e1.parameters.at("head.p3.out.weight").data != e2.parameters.at("head.p3.out.weight").data);
  // FA did move during the joint phase.
  const auto e0 = load_checkpoint(trainer.epoch_checkpoint_path(0));
  CHECK(values_of(e0, &DYolo<float>::is_fa_parameter) != values_of(initial, &DYolo<float>::is_fa_parameter));

  std::ifstream in(out / "metrics.tsv");
  std::string line;
  std::getline(in, line);
  CHECK(line == kMetricsHeader);
  const int spe = trainer.steps_per_epoch();
  int rows = 0;
  double prev_lambda = 0;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string kind;
    int epoch;
    long step;
    double lr, ld, lr_loss, l1, l2, total;
    ss >> kind >> epoch >> step >> lr >> ld >> lr_loss >> l1 >> l2 >> total;
    if (kind != "step") continue;
    ++rows;
    CHECK(std::abs(total - (l1 * ld + l2 * lr_loss)) <= 1e-6);
    if (epoch == 0) {
      if (step % spe == 0) CHECK(l2 == 2.0);
      else CHECK(l2 <= prev_lambda);
      CHECK(lr_loss > 0);
    } else {
      CHECK(lr_loss == 0);
    }
    prev_lambda = l2;
  }
  CHECK(rows == 3 * spe);
  fs::remove_all(out);
}

TEST_CASE("resume reproduces an uninterrupted run bit-exactly") {
  const auto a = scratch("resume_a");
  const auto b = scratch("resume_b");
  auto setup = train_setup(small_config("V5", 3));
  {
    Trainer full(setup, small_dataset(), a);
    full.pretrain_cfe();
    full.run();
  }
  {
    Trainer first(setup, small_dataset(), b);
    first.pretrain_cfe();
    first.run(1);
    CHECK(first.next_epoch() == 1);
  }
  {
    Trainer second(setup, small_dataset(), b);
    second.resume(b / "checkpoints/epoch_000.ckpt");
    CHECK(second.next_epoch() == 1);
    second.run();
  }
  const auto ca = load_checkpoint(a / "checkpoints/epoch_002.ckpt");
  const auto cb = load_checkpoint(b / "checkpoints/epoch_002.ckpt");
  REQUIRE(ca.parameters.size() == cb.parameters.size());
  for (const auto& [name, t] : ca.parameters) CHECK(cb.parameters.at(name).data == t.data);
  for (const auto& [name, t] : ca.momentum) CHECK(cb.momentum.at(name).data == t.data);

  // A different configuration refuses to resume.
  auto other = train_setup(small_config("V5", 4));
  Trainer mismatched(other, small_dataset(), scratch("resume_c"));
  CHECK_THROWS_AS(mismatched.resume(b / "checkpoints/epoch_000.ckpt"), StateError);
  // And an inference checkpoint is not resumable.
  Trainer t(setup, small_dataset(), scratch("resume_c"));
  save_checkpoint(b / "inf.ckpt", t.inference_checkpoint());
  CHECK_THROWS_AS(t.resume(b / "inf.ckpt"), StateError);
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(scratch("resume_c"));
}

TEST_CASE("pretrained CFE teacher beats an untrained backbone on clean images") {
  DatasetSpec spec;
  spec.out_dir = scratch("cfe_ds");
  spec.train = 96;
  spec.test = 20;
  spec.seed = 11;
  build_dataset(spec);
  const auto ds = load_dataset(spec.out_dir / "manifest.tsv");
  TrainConfig tc;
  auto teacher = pretrain_cfe(ds.train, DetectorConfig::ablation("V5"), tc, 12);
  for (const auto& p : teacher.parameters()) CHECK_FALSE(p.tensor.requires_grad());
  Rng rng(5);
  DYolo<float> untrained(DetectorConfig::ablation("V0"), rng);
  const double trained_map = evaluate(teacher, ds.test, 0.01, true).map;
  const double base_map = evaluate(untrained, ds.test, 0.01, true).map;
  INFO("trained " << trained_map << " untrained " << base_map);
  CHECK(trained_map > base_map);
  CHECK(trained_map > 0.05);
  fs::remove_all(spec.out_dir);
}
