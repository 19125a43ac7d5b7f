#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include "dyolo/errors.hpp"

namespace dyolo {

// Object classes shared by the toy generator, annotations and the detector.
inline constexpr std::array<std::string_view, 5> kClassNames{"person", "bicycle", "car",
                                                             "motorcycle", "bus"};
inline constexpr int kClassCount = static_cast<int>(kClassNames.size());

// Canonical class id for a label, accepting common aliases.
inline std::optional<int> class_id_from_name(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  if (name == "motor" || name == "motorbike") name = "motorcycle";
  if (name == "bike") name = "bicycle";
  for (int i = 0; i < kClassCount; ++i) {
    if (kClassNames[i] == name) return i;
  }
  return std::nullopt;
}

inline std::string class_name(int id) {
  if (id < 0 || id >= kClassCount) throw InvalidArgument("class_name: unknown class id " + std::to_string(id));
  return std::string(kClassNames[id]);
}

// Continuous pixel coordinates; xmax/ymax are exclusive edges.
struct Box {
  double xmin = 0;
  double ymin = 0;
  double xmax = 0;
  double ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  bool valid() const { return xmax > xmin && ymax > ymin; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct GroundTruthBox {
  int class_id = 0;
  Box box;
  bool difficult = false;
};

struct Detection {
  int class_id = 0;
  Box box;
  double confidence = 0;
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw InvalidArgument("iou: degenerate box");
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

}  // namespace dyolo
