#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "dyolo/hazegen.hpp"

using namespace dyolo;
using Catch::Approx;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dyolo_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("depth map spot values") {
  const auto d = depth_map(100, 100);
  // Centre of an even-sized image sits between pixels; take a 101 map for
  // an exact centre pixel.
  const auto odd = depth_map(101, 81);
  CHECK(odd.at(50, 40) == std::sqrt(101.0));
  CHECK(d.at(0, 0) == Approx(7.19986).margin(1e-4));
  CHECK(d.at(99, 99) == d.at(0, 0));
  CHECK(d.at(0, 99) == d.at(99, 0));
  // Depth falls off radially: centre is the maximum.
  CHECK(odd.at(50, 40) > odd.at(0, 0));
  // Large images clamp to zero at the corners.
  const auto big = depth_map(4000, 4000);
  CHECK(big.at(0, 0) == 0.0);
  CHECK_THROWS_AS(depth_map(0, 10), InvalidArgument);
}

TEST_CASE("depth map is radially symmetric") {
  const auto d = depth_map(37, 37);
  for (int y = 0; y < 37; ++y)
    for (int x = 0; x < 37; ++x) {
      CHECK(d.at(x, y) == Approx(d.at(36 - x, y)).margin(1e-12));
      CHECK(d.at(x, y) == Approx(d.at(y, x)).margin(1e-12));
    }
}

TEST_CASE("transmission values and monotonicity in beta") {
  DepthMap d{1, 1, {10.0}};
  CHECK(transmission(d, 0.1).at(0, 0) == Approx(0.367879).margin(1e-6));
  CHECK(transmission(d, 0.0).at(0, 0) == 1.0);
  CHECK_THROWS_AS(transmission(d, -0.1), InvalidArgument);
  const auto depth = depth_map(64, 64);
  const auto t1 = transmission(depth, 0.07);
  const auto t2 = transmission(depth, 0.12);
  for (std::size_t i = 0; i < t1.values.size(); ++i) CHECK(t2.values[i] <= t1.values[i]);
}

TEST_CASE("zero haze is the identity and haze stays between J and A") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  const auto depth = depth_map(48, 40);
  int violations = 0;
  double max_diff = 0;
  for (int i = 0; i < 100; ++i) {
    ImagePlane img(48, 40);
    for (double& v : img.values) v = u(rng);
    const auto same = apply_haze(img, transmission(depth, 0.0), 0.5);
    for (std::size_t k = 0; k < img.values.size(); ++k) max_diff = std::max(max_diff, std::abs(same.values[k] - img.values[k]));
    const double a = u(rng);
    const auto hazy = apply_haze(img, transmission(depth, u(rng) * 0.5), a);
    for (std::size_t k = 0; k < img.values.size(); ++k) {
      const double j = img.values[k];
      violations += hazy.values[k] < std::min(j, a) || hazy.values[k] > std::max(j, a);
    }
  }
  CHECK(max_diff <= 1e-6);
  CHECK(violations == 0);
}

TEST_CASE("zero haze survives a PNG round trip") {
  const auto dir = scratch("png");
  fs::create_directories(dir);
  ToySceneOptions opt;
  opt.forced_beta = 0.0;
  const auto scene = generate_toy_scene(42, opt);
  write_png(dir / "c.png", scene.clean);
  write_png(dir / "h.png", scene.hazy);
  CHECK(read_png(dir / "c.png").values == read_png(dir / "h.png").values);
  CHECK(read_png(dir / "c.png").values == quantized(scene.clean).values);
  CHECK_THROWS_AS(read_png(dir / "nope.png"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("toy scenes are deterministic with valid boxes") {
  ToySceneOptions opt;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = generate_toy_scene(seed, opt);
    const auto b = generate_toy_scene(seed, opt);
    CHECK(a.clean.values == b.clean.values);
    CHECK(a.hazy.values == b.hazy.values);
    CHECK(a.haze.beta >= 0.07);
    CHECK(a.haze.beta <= 0.12);
    REQUIRE(!a.boxes.empty());
    CHECK(a.boxes.size() <= 6);
    for (const auto& g : a.boxes) {
      CHECK(g.box.valid());
      CHECK(g.box.xmin >= 0);
      CHECK(g.box.ymin >= 0);
      CHECK(g.box.xmax <= 64);
      CHECK(g.box.ymax <= 64);
      CHECK(g.class_id >= 0);
      CHECK(g.class_id < kClassCount);
    }
  }
  opt.width = 16;
  CHECK_THROWS_AS(generate_toy_scene(0, opt), InvalidArgument);
}

TEST_CASE("build_dataset writes a reproducible manifest") {
  const auto a = scratch("ds_a");
  const auto b = scratch("ds_b");
  DatasetSpec spec;
  spec.train = 6;
  spec.test = 3;
  spec.out_dir = a;
  const auto m = build_dataset(spec);
  CHECK(m.rows.size() == 9);
  CHECK(m.split("train").size() == 6);
  CHECK(m.split("test").size() == 3);
  spec.out_dir = b;
  build_dataset(spec);
  CHECK(slurp(a / "manifest.tsv") == slurp(b / "manifest.tsv"));
  CHECK(slurp(a / "images/hazy/000004.png") == slurp(b / "images/hazy/000004.png"));

  const auto back = read_manifest(a / "manifest.tsv");
  REQUIRE(back.rows.size() == 9);
  for (const auto& r : back.rows) {
    CHECK(r.beta >= 0.07);
    CHECK(r.beta <= 0.12);
    CHECK(fs::exists(a / r.clean_path));
    CHECK(!read_voc(a / r.annotation_path).objects.empty());
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("build_dataset class filtering") {
  const auto dir = scratch("ds_cls");
  DatasetSpec spec;
  spec.train = 4;
  spec.test = 0;
  spec.out_dir = dir;
  spec.classes = {"person", "dog"};
  CHECK_THROWS_AS(build_dataset(spec), ValidationError);

  spec.classes = {"person", "car"};
  const auto m = build_dataset(spec);
  for (const auto& r : m.rows)
    for (const auto& o : read_voc(dir / r.annotation_path).objects) CHECK((o.class_id == 0 || o.class_id == 2));
  fs::remove_all(dir);
}

TEST_CASE("build_dataset imports a VOC corpus and drops foreign classes") {
  const auto src = scratch("corpus");
  const auto out = scratch("corpus_out");
  fs::create_directories(src);
  ImagePlane img(64, 64, 0.3);
  write_png(src / "p.png", img);
  write_png(src / "q.png", img);
  write_voc(src / "p.xml", Annotation{"p.png", 64, 64, {{2, {4, 4, 20, 20}, false}}, 0});
  std::ofstream(src / "q.xml") << "<annotation><filename>q.png</filename><object><name>dog</name><bndbox>"
                                  "<xmin>1</xmin><ymin>1</ymin><xmax>9</xmax><ymax>9</ymax></bndbox></object>"
                                  "</annotation>";
  DatasetSpec spec;
  spec.train = 5;
  spec.test = 0;
  spec.out_dir = out;
  spec.import_annotations = src;
  const auto m = build_dataset(spec);
  CHECK(m.rows.size() == 1);  // the "dog"-only image is skipped
  CHECK(m.dropped_boxes == 1);
  fs::remove_all(src);
  fs::remove_all(out);
}

TEST_CASE("haze parameter validation") {
  HazeParams p;
  p.atmospheric_light = 1.5;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  p.beta_min = 0.2;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  std::mt19937_64 rng(9);
  for (int i = 0; i < 1000; ++i) {
    const double b = p.sample_beta(rng);
    CHECK(b >= 0.07);
    CHECK(b <= 0.12);
  }
}
