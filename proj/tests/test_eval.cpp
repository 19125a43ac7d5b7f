#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "dyolo/eval.hpp"
#include "dyolo/voc.hpp"
#include "ap_oracle.hpp"

using namespace dyolo;
using namespace dyolo::testing;
using Catch::Approx;

TEST_CASE("iou basic cases") {
  const Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{20, 20, 30, 30}) == 0.0);
  CHECK(iou(a, Box{10, 0, 20, 10}) == 0.0);  // touching edges
  CHECK(iou(a, Box{5, 5, 15, 15}) == Approx(0.142857).margin(1e-6));
  CHECK_THROWS_AS(iou(a, Box{3, 3, 3, 8}), InvalidArgument);
  CHECK_THROWS_AS(iou(Box{5, 0, 4, 2}, a), InvalidArgument);
}

TEST_CASE("iou agrees with a rasterized pixel count") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Box a = random_box(rng), b = random_box(rng);
    int inter = 0, uni = 0;
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x) {
        const bool ia = x >= a.xmin && x < a.xmax && y >= a.ymin && y < a.ymax;
        const bool ib = x >= b.xmin && x < b.xmax && y >= b.ymin && y < b.ymax;
        inter += ia && ib;
        uni += ia || ib;
      }
    CHECK(iou(a, b) == Approx(static_cast<double>(inter) / uni).margin(1e-12));
  }
}

TEST_CASE("average precision edge cases") {
  const std::vector<ImageGroundTruth> gts{{"a", {0, {0, 0, 10, 10}, false}}, {"b", {0, {5, 5, 9, 9}, false}}};
  SECTION("perfect detector") {
    const std::vector<ImageDetection> dets{{"a", {0, {0, 0, 10, 10}, 0.9}}, {"b", {0, {5, 5, 9, 9}, 0.3}}};
    CHECK(average_precision(0, dets, gts, 0.5).ap == 1.0);
  }
  SECTION("no detections") { CHECK(average_precision(0, {}, gts, 0.5).ap == 0.0); }
  SECTION("no ground truth") {
    const auto r = average_precision(0, {{"a", {0, {0, 0, 1, 1}, 0.5}}}, {}, 0.5);
    CHECK(r.ap == 0.0);
    CHECK(r.false_positives == 1);
  }
  SECTION("duplicate detections: first is TP, rest FP") {
    const std::vector<ImageDetection> dets{{"a", {0, {0, 0, 10, 10}, 0.9}}, {"a", {0, {0, 0, 10, 10}, 0.8}}};
    const auto r = average_precision(0, dets, gts, 0.5);
    CHECK(r.true_positives == 1);
    CHECK(r.false_positives == 1);
    CHECK(r.ap == Approx(0.5));
  }
  SECTION("detections in the wrong image never match") {
    const auto r = average_precision(0, {{"b", {0, {0, 0, 10, 10}, 0.9}}}, gts, 0.5);
    CHECK(r.true_positives == 0);
  }
}

TEST_CASE("mean_ap on a hand-tabulated three-image fixture") {
  // person: TP, FP, TP, FP(duplicate) over 3 GT -> AP = 1/3 + 1/3 * 2/3 = 5/9
  // bicycle: one detection at IoU exactly 0.5 -> AP = 1
  const std::vector<ImageGroundTruth> gts{
      {"a", {0, {0, 0, 10, 10}, false}},
      {"b", {0, {20, 20, 30, 30}, false}},
      {"c", {0, {0, 0, 10, 10}, false}},
      {"b", {1, {0, 0, 20, 10}, false}},
  };
  const std::vector<ImageDetection> dets{
      {"a", {0, {0, 0, 10, 10}, 0.9}}, {"b", {0, {0, 0, 10, 10}, 0.8}}, {"c", {0, {1, 0, 10, 10}, 0.7}},
      {"a", {0, {0, 0, 10, 10}, 0.6}}, {"b", {1, {0, 0, 10, 10}, 0.5}}, {"c", {2, {0, 0, 5, 5}, 0.4}},
  };
  const auto report = mean_ap(dets, gts);
  REQUIRE(report.classes.size() == 2);  // car has detections but no GT
  const auto& person = report.classes[0];
  CHECK(person.ap == Approx(5.0 / 9.0).margin(1e-12));
  CHECK(person.ground_truth == 3);
  CHECK(person.true_positives == 2);
  CHECK(person.false_positives == 2);
  const auto& bicycle = report.classes[1];
  CHECK(bicycle.ap == 1.0);
  CHECK(bicycle.true_positives == 1);
  CHECK(report.map == Approx(7.0 / 9.0).margin(1e-12));

  std::ostringstream table, tsv;
  print_report(table, report);
  write_report_tsv(tsv, report);
  CHECK(table.str().find("person") != std::string::npos);
  CHECK(tsv.str().find("ap.bicycle\t1\n") != std::string::npos);
}

TEST_CASE("mean_ap rejects unknown class ids") {
  CHECK_THROWS_AS(mean_ap({{"a", {7, {0, 0, 1, 1}, 0.5}}}, {}), ValidationError);
  CHECK_THROWS_AS(mean_ap({}, {{"a", {-1, {0, 0, 1, 1}, false}}}), ValidationError);
}

TEST_CASE("AP equals the brute-force oracle on 1000 random instances") {
  std::mt19937_64 rng(20240611);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto inst = random_instance(rng);
    for (int c = 0; c < 2; ++c) {
      const double ap = average_precision(c, inst.dets, inst.gts, 0.5).ap;
      const double ref = oracle_ap(c, inst.dets, inst.gts, 0.5);
      mismatches += ap != ref;
      CHECK(ap >= 0.0);
      CHECK(ap <= 1.0);
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("AP does not depend on detection order") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto inst = random_instance(rng);
    const double before = mean_ap(inst.dets, inst.gts, 2).map;
    std::shuffle(inst.dets.begin(), inst.dets.end(), rng);
    CHECK(mean_ap(inst.dets, inst.gts, 2).map == before);
  }
}

TEST_CASE("raising a true positive's confidence never lowers AP") {
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    auto inst = random_instance(rng);
    // A detection that exactly reproduces a GT box is a TP whatever its rank,
    // as long as it is the only detection on that GT.
    for (auto& d : inst.dets) {
      for (int c = 0; c < 2; ++c) {
        const double base = average_precision(c, inst.dets, inst.gts, 0.5).ap;
        const auto r = average_precision(c, {d}, inst.gts, 0.5);
        if (d.det.class_id != c || r.true_positives != 1) continue;
        const bool alone = std::none_of(inst.dets.begin(), inst.dets.end(), [&](const ImageDetection& o) {
          return &o != &d && o.image == d.image && o.det.class_id == c && iou(o.det.box, d.det.box) > 0;
        });
        if (!alone) continue;
        const double old = d.det.confidence;
        d.det.confidence = std::min(1.0, old + 0.3);
        CHECK(average_precision(c, inst.dets, inst.gts, 0.5).ap >= base);
        d.det.confidence = old;
        ++checked;
      }
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("VOC annotations round-trip with aliases and dropped classes") {
  const auto dir = std::filesystem::temp_directory_path() / "dyolo_test_voc";
  std::filesystem::create_directories(dir);
  Annotation ann{"x.png", 64, 48, {{3, {4, 5, 20, 30}, false}, {0, {0, 0, 64, 48}, true}}, 0};
  write_voc(dir / "a.xml", ann);
  const auto back = read_voc(dir / "a.xml");
  REQUIRE(back.objects.size() == 2);
  CHECK(back.objects[0].class_id == 3);
  CHECK(back.objects[0].box == Box{4, 5, 20, 30});
  CHECK(back.objects[1].difficult);
  CHECK(back.width == 64);

  std::ofstream(dir / "b.xml") << "<annotation><filename>b.png</filename>"
                                  "<object><name>Motorbike</name><bndbox><xmin>1</xmin><ymin>1</ymin>"
                                  "<xmax>5</xmax><ymax>6</ymax></bndbox></object>"
                                  "<object><name>dog</name><bndbox><xmin>1</xmin><ymin>1</ymin>"
                                  "<xmax>5</xmax><ymax>6</ymax></bndbox></object></annotation>";
  const auto b = read_voc(dir / "b.xml");
  REQUIRE(b.objects.size() == 1);
  CHECK(b.objects[0].class_id == 3);
  CHECK(b.objects[0].box == Box{0, 0, 5, 6});
  CHECK(b.dropped == 1);
  CHECK_THROWS_AS(read_voc(dir / "missing.xml"), IoError);
  std::filesystem::remove_all(dir);
}
