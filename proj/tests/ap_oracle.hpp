#pragma once

// Brute-force AP oracle and random instance generator shared by the unit and
// acceptance tests.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "dyolo/eval.hpp"

namespace dyolo::testing {

// Independent AP: explicit index sort, a linear scan for the best unmatched
// GT, and the interpolated integral written as sum_k dr_k * max_{j>=k} p_j.
inline double oracle_ap(int cls, const std::vector<ImageDetection>& dets, const std::vector<ImageGroundTruth>& gts,
                 double thr) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].det.class_id == cls) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    const auto& a = dets[i];
    const auto& b = dets[j];
    if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
    if (a.det.box.xmin != b.det.box.xmin) return a.det.box.xmin < b.det.box.xmin;
    if (a.det.box.ymin != b.det.box.ymin) return a.det.box.ymin < b.det.box.ymin;
    if (a.det.box.xmax != b.det.box.xmax) return a.det.box.xmax < b.det.box.xmax;
    if (a.det.box.ymax != b.det.box.ymax) return a.det.box.ymax < b.det.box.ymax;
    return a.image < b.image;
  });
  int npos = 0;
  for (const auto& g : gts) npos += g.gt.class_id == cls;
  if (npos == 0) return 0.0;
  std::vector<bool> used(gts.size(), false);
  std::vector<double> rec, prec;
  int tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& d = dets[order[k]];
    double best = -1;
    int bi = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].gt.class_id != cls || gts[g].image != d.image) continue;
      const Box& a = d.det.box;
      const Box& b = gts[g].gt.box;
      const double iw = std::max(0.0, std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin));
      const double ih = std::max(0.0, std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin));
      const double o = iw * ih == 0 ? 0.0 : iw * ih / (a.area() + b.area() - iw * ih);
      if (o > best) {
        best = o;
        bi = static_cast<int>(g);
      }
    }
    if (bi >= 0 && best >= thr) {
      used[bi] = true;
      ++tp;
    }
    rec.push_back(static_cast<double>(tp) / npos);
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  double ap = 0, prev = 0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    if (rec[k] != prev) {
      double pmax = 0;
      for (std::size_t j = k; j < prec.size(); ++j) pmax = std::max(pmax, prec[j]);
      ap += (rec[k] - prev) * pmax;
      prev = rec[k];
    }
  }
  return ap;
}

inline Box random_box(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pos(0, 12), len(2, 8);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + len(rng), y + len(rng)};
}

struct Instance {
  std::vector<ImageDetection> dets;
  std::vector<ImageGroundTruth> gts;
};

// Small integer grids and a coarse confidence set so ties occur often.
inline Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 10), img(0, 2), cls(0, 1), conf(1, 8);
  Instance inst;
  const int ng = count(rng), nd = count(rng);
  for (int i = 0; i < ng; ++i) {
    inst.gts.push_back({"img" + std::to_string(img(rng)), GroundTruthBox{cls(rng), random_box(rng), false}});
  }
  for (int i = 0; i < nd; ++i) {
    ImageDetection d{"img" + std::to_string(img(rng)), Detection{cls(rng), random_box(rng), conf(rng) / 8.0}};
    // Half of the detections are jittered copies of a GT.
    if (!inst.gts.empty() && rng() % 2) {
      const auto& g = inst.gts[rng() % inst.gts.size()];
      d.image = g.image;
      d.det.class_id = g.gt.class_id;
      d.det.box = g.gt.box;
      d.det.box.xmax += static_cast<double>(rng() % 3);
    }
    inst.dets.push_back(d);
  }
  return inst;
}

}  // namespace dyolo::testing
