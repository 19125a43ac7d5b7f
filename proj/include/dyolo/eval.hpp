#pragma once

// VOC-style detection metrics: greedy matching at an IoU threshold and
// all-point interpolated average precision, averaged over classes that have
// at least one ground-truth box.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dyolo/boxes.hpp"

namespace dyolo {

// Detection tagged with the image it belongs to.
struct ImageDetection {
  std::string image;
  Detection det;
};

struct ImageGroundTruth {
  std::string image;
  GroundTruthBox gt;
};

struct ClassResult {
  int class_id = 0;
  double ap = 0;
  int ground_truth = 0;
  int true_positives = 0;
  int false_positives = 0;
  std::vector<double> recall;     // along the confidence-sorted detections
  std::vector<double> precision;
};

struct EvalReport {
  double iou_threshold = 0.5;
  std::vector<ClassResult> classes;  // classes with >= 1 GT, by id
  double map = 0;
};

namespace detail {

// Descending confidence; ties broken by box coordinates, then image key.
inline bool detection_before(const ImageDetection& a, const ImageDetection& b) {
  return std::tie(b.det.confidence, a.det.box.xmin, a.det.box.ymin, a.det.box.xmax, a.det.box.ymax, a.image) <
         std::tie(a.det.confidence, b.det.box.xmin, b.det.box.ymin, b.det.box.xmax, b.det.box.ymax, b.image);
}

}  // namespace detail

// Area under the all-point interpolated precision/recall curve.
inline double interpolated_area(const std::vector<double>& recall, const std::vector<double>& precision) {
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

// AP for one class. Each detection, in descending confidence, claims the
// unmatched ground truth of its image with the highest IoU, provided that
// IoU reaches the threshold; otherwise it is a false positive.
inline ClassResult average_precision(int class_id, std::vector<ImageDetection> dets,
                                     const std::vector<ImageGroundTruth>& gts, double iou_threshold) {
  ClassResult r;
  r.class_id = class_id;
  std::map<std::string, std::vector<std::pair<Box, bool>>> by_image;
  for (const auto& g : gts) {
    if (g.gt.class_id != class_id) continue;
    by_image[g.image].push_back({g.gt.box, false});
    ++r.ground_truth;
  }
  std::erase_if(dets, [&](const ImageDetection& d) { return d.det.class_id != class_id; });
  std::sort(dets.begin(), dets.end(), detail::detection_before);

  int tp = 0, fp = 0;
  for (const auto& d : dets) {
    double best = -1;
    std::pair<Box, bool>* match = nullptr;
    if (auto it = by_image.find(d.image); it != by_image.end()) {
      for (auto& cand : it->second) {
        if (cand.second) continue;
        const double o = iou(d.det.box, cand.first);
        if (o > best) {
          best = o;
          match = &cand;
        }
      }
    }
    if (match && best >= iou_threshold) {
      match->second = true;
      ++tp;
    } else {
      ++fp;
    }
    r.recall.push_back(r.ground_truth > 0 ? static_cast<double>(tp) / r.ground_truth : 0.0);
    r.precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  r.true_positives = tp;
  r.false_positives = fp;
  r.ap = r.ground_truth > 0 ? interpolated_area(r.recall, r.precision) : 0.0;
  return r;
}

// Classes without ground truth are left out of the mean.
inline EvalReport mean_ap(const std::vector<ImageDetection>& dets, const std::vector<ImageGroundTruth>& gts,
                          int class_count = kClassCount, double iou_threshold = 0.5) {
  for (const auto& d : dets) {
    if (d.det.class_id < 0 || d.det.class_id >= class_count) {
      throw ValidationError("mean_ap: unknown class id " + std::to_string(d.det.class_id));
    }
  }
  for (const auto& g : gts) {
    if (g.gt.class_id < 0 || g.gt.class_id >= class_count) {
      throw ValidationError("mean_ap: unknown class id " + std::to_string(g.gt.class_id));
    }
  }
  EvalReport report;
  report.iou_threshold = iou_threshold;
  double sum = 0;
  for (int c = 0; c < class_count; ++c) {
    auto r = average_precision(c, dets, gts, iou_threshold);
    if (r.ground_truth == 0) continue;
    sum += r.ap;
    report.classes.push_back(std::move(r));
  }
  report.map = report.classes.empty() ? 0.0 : sum / static_cast<double>(report.classes.size());
  return report;
}

inline void print_report(std::ostream& os, const EvalReport& report) {
  os << std::left << std::setw(12) << "class" << std::right << std::setw(8) << "AP" << std::setw(7) << "GT"
     << std::setw(7) << "TP" << std::setw(7) << "FP" << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& c : report.classes) {
    os << std::left << std::setw(12) << class_name(c.class_id) << std::right << std::setw(8) << c.ap
       << std::setw(7) << c.ground_truth << std::setw(7) << c.true_positives << std::setw(7)
       << c.false_positives << "\n";
  }
  os << std::left << std::setw(12) << "mAP" << std::right << std::setw(8) << report.map << "\n";
  os.unsetf(std::ios::floatfield);
}

// Machine-readable form: key<TAB>value lines.
inline void write_report_tsv(std::ostream& os, const EvalReport& report) {
  os << std::setprecision(17);
  os << "iou_threshold\t" << report.iou_threshold << "\n";
  os << "mAP\t" << report.map << "\n";
  for (const auto& c : report.classes) {
    const std::string k = class_name(c.class_id);
    os << "ap." << k << "\t" << c.ap << "\n";
    os << "gt." << k << "\t" << c.ground_truth << "\n";
    os << "tp." << k << "\t" << c.true_positives << "\n";
    os << "fp." << k << "\t" << c.false_positives << "\n";
  }
}

}  // namespace dyolo
