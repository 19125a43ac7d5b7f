#pragma once

// Dual-branch detector. The hazy image runs through the backbone (F_h);
// the FA stacks turn F_h into dehazed features F_d; attention fusion blends
// the two branches; an anchor-free head predicts boxes on strides 8/16/32.
// The clear-feature extractor (CFE) sees the paired clean image during
// training only and provides distillation targets F_c.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "dyolo/adaption.hpp"
#include "dyolo/boxes.hpp"
#include "dyolo/fusion.hpp"
#include "dyolo/image.hpp"

namespace dyolo {

inline constexpr std::array<int, 3> kStrides{8, 16, 32};

struct DetectorConfig {
  bool dual_branch = true;
  bool use_cfe = true;
  bool use_fa = true;
  bool use_af = true;
  ConvKind conv_kind = ConvKind::od;
  int stem_channels = 16;
  std::array<int, 3> channels{32, 64, 128};
  int class_count = kClassCount;
  int od_kernels = 4;
  double od_reduction = 0.25;
  int fusion_pool = 4;

  void validate() const {
    if (use_af && !dual_branch) throw ValidationError("model.use_af requires model.dual_branch");
    if (dual_branch && !use_fa) throw ValidationError("model.dual_branch requires model.use_fa");
    if (class_count < 1 || class_count > kClassCount) throw ValidationError("model.class_count must lie in [1,5]");
    for (int c : channels)
      if (c < 1) throw ValidationError("model.channels must be positive");
    if (stem_channels < 1 || od_kernels < 1 || fusion_pool < 1 || od_reduction <= 0) {
      throw ValidationError("model: stem_channels, od_kernels, fusion_pool and od_reduction must be positive");
    }
  }

  // Module combinations V0..V6 of the ablation table.
  static DetectorConfig ablation(std::string_view name) {
    DetectorConfig c;
    auto set = [&c](bool dual, bool cfe, bool fa, bool af, ConvKind kind) {
      c.dual_branch = dual;
      c.use_cfe = cfe;
      c.use_fa = fa;
      c.use_af = af;
      c.conv_kind = kind;
    };
    if (name == "V0") set(false, false, false, false, ConvKind::od);
    else if (name == "V1") set(false, true, false, false, ConvKind::od);
    else if (name == "V2") set(false, false, true, false, ConvKind::od);
    else if (name == "V3") set(false, true, true, false, ConvKind::od);
    else if (name == "V4") set(true, true, true, false, ConvKind::od);
    else if (name == "V5") set(true, true, true, true, ConvKind::od);
    else if (name == "V6") set(true, true, true, true, ConvKind::plain);
    else throw ValidationError("unknown ablation '" + std::string(name) + "' (expected V0..V6)");
    return c;
  }
};

inline constexpr std::array<std::string_view, 7> kAblationNames{"V0", "V1", "V2", "V3", "V4", "V5", "V6"};

enum class FeatureRole { clear, hazy, dehazed, fused };

template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, 3> levels;
  FeatureRole role = FeatureRole::hazy;

  std::vector<Tensor<T>> as_vector() const { return {levels.begin(), levels.end()}; }
};

// Packs images into an N x 3 x H x W tensor.
template <typename T>
Tensor<T> to_tensor(const std::vector<const ImagePlane*>& images) {
  if (images.empty()) throw InvalidArgument("to_tensor: empty batch");
  const int w = images[0]->width;
  const int h = images[0]->height;
  std::vector<T> v(static_cast<std::size_t>(images.size()) * 3 * w * h);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->width != w || images[n]->height != h) throw InvalidArgument("to_tensor: mixed image sizes");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          v[((n * 3 + c) * h + y) * w + x] = static_cast<T>(images[n]->at(x, y, c));
  }
  return Tensor<T>::from(Shape{static_cast<int>(images.size()), 3, h, w}, std::move(v));
}

// Stem (stride 2) followed by four stages of [3x3 stride 2, 3x3 stride 1],
// SiLU after every convolution. The last three stages are exported.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const DetectorConfig& cfg, Rng& rng) {
    const int c0 = cfg.stem_channels;
    const auto& c = cfg.channels;
    stem_ = Conv2d<T>(3, c0, 3, 2, 1, rng);
    const std::array<int, 5> widths{c0, c[0], c[0], c[1], c[2]};
    for (int s = 0; s < 4; ++s) {
      down_[s] = Conv2d<T>(widths[s], widths[s + 1], 3, 2, 1, rng);
      refine_[s] = Conv2d<T>(widths[s + 1], widths[s + 1], 3, 1, 1, rng);
    }
  }

  FeaturePyramid<T> forward(const Tensor<T>& image) const {
    const Shape s = image.shape();
    if (s.c != 3) throw InvalidArgument("backbone: expected 3 input channels, got " + s.str());
    if (s.h % 32 != 0 || s.w % 32 != 0) {
      throw InvalidArgument("backbone: image size must be divisible by 32, got " + s.str());
    }
    FeaturePyramid<T> out;
    out.role = FeatureRole::hazy;
    auto x = silu(stem_.forward(image));
    for (int st = 0; st < 4; ++st) {
      x = silu(refine_[st].forward(silu(down_[st].forward(x))));
      if (st > 0) out.levels[st - 1] = x;
    }
    return out;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    stem_.collect(out, prefix + ".stem");
    for (int s = 0; s < 4; ++s) {
      down_[s].collect(out, prefix + ".stage" + std::to_string(s + 1) + ".down");
      refine_[s].collect(out, prefix + ".stage" + std::to_string(s + 1) + ".refine");
    }
  }

 private:
  Conv2d<T> stem_;
  std::array<Conv2d<T>, 4> down_;
  std::array<Conv2d<T>, 4> refine_;
};

// Per-level output channels: [class logits (K), objectness, tx, ty, tw, th].
template <typename T>
class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(const DetectorConfig& cfg, Rng& rng) : classes_(cfg.class_count) {
    for (int l = 0; l < 3; ++l) {
      const int c = cfg.channels[l];
      mix_[l] = Conv2d<T>(c, c, 3, 1, 1, rng);
      out_[l] = Conv2d<T>(c, classes_ + 5, 1, 1, 0, rng);
      auto b = out_[l].bias().mutable_data();
      for (int k = 0; k < classes_; ++k) b[k] = T(-2);
      b[classes_] = T(-4);
      // Small initial box logits keep early GIoU gradients well scaled.
      for (T& w : out_[l].weight().mutable_data()) w *= T(0.1);
    }
  }

  std::array<Tensor<T>, 3> forward(const FeaturePyramid<T>& features) const {
    std::array<Tensor<T>, 3> out;
    for (int l = 0; l < 3; ++l) out[l] = out_[l].forward(silu(mix_[l].forward(features.levels[l])));
    return out;
  }

  int class_count() const { return classes_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    for (int l = 0; l < 3; ++l) {
      mix_[l].collect(out, prefix + ".p" + std::to_string(l + 3) + ".mix");
      out_[l].collect(out, prefix + ".p" + std::to_string(l + 3) + ".out");
    }
  }

 private:
  int classes_ = kClassCount;
  std::array<Conv2d<T>, 3> mix_;
  std::array<Conv2d<T>, 3> out_;
};

// ---------------------------------------------------------------------------
// Box parametrisation shared by the loss and the decoder. For a cell (gx, gy)
// on stride s:  cx = (gx + 2 sig(tx) - 0.5) s,  w = 2 s (2 sig(tw))^2.

namespace detail {

struct DecodedBox {
  double x1, y1, x2, y2;
};

inline DecodedBox decode_cell(double tx, double ty, double tw, double th, int gx, int gy, int stride) {
  const double cx = (gx + 2 * detail::sigmoid_value(tx) - 0.5) * stride;
  const double cy = (gy + 2 * detail::sigmoid_value(ty) - 0.5) * stride;
  const double sw = 2 * detail::sigmoid_value(tw);
  const double sh = 2 * detail::sigmoid_value(th);
  const double w = 2.0 * stride * sw * sw;
  const double h = 2.0 * stride * sh * sh;
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

// 1 - GIoU and its gradient with respect to the predicted corners.
struct GiouTerm {
  double loss;
  double d[4];  // d/dx1, d/dy1, d/dx2, d/dy2
};

inline GiouTerm giou_loss(const DecodedBox& p, const Box& g) {
  const double pw = p.x2 - p.x1, ph = p.y2 - p.y1;
  const double gw = g.xmax - g.xmin, gh = g.ymax - g.ymin;
  const double ix1 = std::max(p.x1, g.xmin), ix2 = std::min(p.x2, g.xmax);
  const double iy1 = std::max(p.y1, g.ymin), iy2 = std::min(p.y2, g.ymax);
  const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = pw * ph + gw * gh - inter;
  const double cw = std::max(p.x2, g.xmax) - std::min(p.x1, g.xmin);
  const double ch = std::max(p.y2, g.ymax) - std::min(p.y1, g.ymin);
  const double hull = cw * ch;
  GiouTerm t;
  t.loss = 2.0 - inter / uni - uni / hull;

  // Partial derivatives of inter, union and hull area.
  double di[4] = {0, 0, 0, 0};
  if (iw > 0 && ih > 0) {
    if (p.x1 > g.xmin) di[0] = -ih;
    if (p.x2 < g.xmax) di[2] = ih;
    if (p.y1 > g.ymin) di[1] = -iw;
    if (p.y2 < g.ymax) di[3] = iw;
  }
  const double darea[4] = {-ph, -pw, ph, pw};
  double dh[4] = {0, 0, 0, 0};
  if (p.x1 < g.xmin) dh[0] = -ch;
  if (p.x2 > g.xmax) dh[2] = ch;
  if (p.y1 < g.ymin) dh[1] = -cw;
  if (p.y2 > g.ymax) dh[3] = cw;
  for (int k = 0; k < 4; ++k) {
    const double du = darea[k] - di[k];
    const double diou = (di[k] * uni - inter * du) / (uni * uni);
    const double dratio = (du * hull - uni * dh[k]) / (hull * hull);
    t.d[k] = -diou - dratio;
  }
  return t;
}

inline double bce_with_logits(double z, double y) {
  // max(z,0) - z y + log(1 + exp(-|z|))
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace detail

// Which cells of which level are responsible for each ground-truth box.
struct Assignment {
  int level;
  int gx;
  int gy;
  int gt;  // index into the image's box list
};

inline int level_for_box(const Box& b) {
  const double side = std::max(b.width(), b.height());
  if (side <= 22) return 0;
  if (side <= 45) return 1;
  return 2;
}

// Centre cell plus the horizontally and vertically nearest neighbours. When
// boxes compete for a cell the smaller box keeps it.
inline std::vector<Assignment> assign_targets(const std::vector<GroundTruthBox>& gts, int image_w, int image_h) {
  std::array<std::vector<int>, 3> owner;
  std::array<int, 3> gw{}, gh{};
  for (int l = 0; l < 3; ++l) {
    gw[l] = image_w / kStrides[l];
    gh[l] = image_h / kStrides[l];
    owner[l].assign(static_cast<std::size_t>(gw[l]) * gh[l], -1);
  }
  for (int i = 0; i < static_cast<int>(gts.size()); ++i) {
    const Box& b = gts[i].box;
    const int l = level_for_box(b);
    const double cx = (b.xmin + b.xmax) / 2 / kStrides[l];
    const double cy = (b.ymin + b.ymax) / 2 / kStrides[l];
    const int gx = std::clamp(static_cast<int>(cx), 0, gw[l] - 1);
    const int gy = std::clamp(static_cast<int>(cy), 0, gh[l] - 1);
    const int nx = (cx - gx) < 0.5 ? gx - 1 : gx + 1;
    const int ny = (cy - gy) < 0.5 ? gy - 1 : gy + 1;
    for (auto [x, y] : {std::pair{gx, gy}, {nx, gy}, {gx, ny}}) {
      if (x < 0 || y < 0 || x >= gw[l] || y >= gh[l]) continue;
      int& o = owner[l][static_cast<std::size_t>(y) * gw[l] + x];
      if (o < 0 || gts[i].box.area() < gts[o].box.area()) o = i;
    }
  }
  std::vector<Assignment> out;
  for (int l = 0; l < 3; ++l)
    for (int y = 0; y < gh[l]; ++y)
      for (int x = 0; x < gw[l]; ++x) {
        const int o = owner[l][static_cast<std::size_t>(y) * gw[l] + x];
        if (o >= 0) out.push_back({l, x, y, o});
      }
  return out;
}

// Detection loss summed over the three levels and averaged over the batch:
// BCE on objectness at every cell, BCE on class logits and 1 - GIoU at
// assigned cells, all with unit weights.
template <typename T>
Tensor<T> detection_loss(const std::array<Tensor<T>, 3>& head, const std::vector<std::vector<GroundTruthBox>>& targets,
                         int image_w, int image_h) {
  const int batch = head[0].shape().n;
  const int ch = head[0].shape().c;
  const int classes = ch - 5;
  if (static_cast<int>(targets.size()) != batch) {
    throw InvalidArgument("detection_loss: " + std::to_string(targets.size()) + " target lists for batch of " +
                          std::to_string(batch));
  }
  std::array<std::vector<T>, 3> grads;
  double total = 0;
  std::array<std::vector<std::vector<int>>, 3> positive;  // per level, per image: cell -> gt or -1
  for (int l = 0; l < 3; ++l) {
    const Shape s = head[l].shape();
    if (s.w * kStrides[l] != image_w || s.h * kStrides[l] != image_h || s.c != ch) {
      throw InvalidArgument("detection_loss: head level " + std::to_string(l) + " has shape " + s.str());
    }
    grads[l].assign(head[l].numel(), T(0));
    positive[l].assign(batch, std::vector<int>(s.plane(), -1));
  }
  for (int n = 0; n < batch; ++n) {
    for (const auto& a : assign_targets(targets[n], image_w, image_h)) {
      positive[a.level][n][static_cast<std::size_t>(a.gy) * head[a.level].shape().w + a.gx] = a.gt;
    }
  }
  const double inv_batch = 1.0 / batch;
  for (int l = 0; l < 3; ++l) {
    const Shape s = head[l].shape();
    const std::size_t pl = s.plane();
    const T* v = head[l].ptr();
    T* g = grads[l].data();
    for (int n = 0; n < batch; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * ch * pl;
      for (std::size_t cell = 0; cell < pl; ++cell) {
        const int gt = positive[l][n][cell];
        auto idx = [&](int c) { return base + static_cast<std::size_t>(c) * pl + cell; };
        const double obj = v[idx(classes)];
        const double y = gt >= 0 ? 1.0 : 0.0;
        total += detail::bce_with_logits(obj, y);
        g[idx(classes)] = static_cast<T>((detail::sigmoid_value(obj) - y) * inv_batch);
        if (gt < 0) continue;
        const auto& target = targets[n][gt];
        for (int k = 0; k < classes; ++k) {
          const double z = v[idx(k)];
          const double yk = k == target.class_id ? 1.0 : 0.0;
          total += detail::bce_with_logits(z, yk);
          g[idx(k)] = static_cast<T>((detail::sigmoid_value(z) - yk) * inv_batch);
        }
        const int gx = static_cast<int>(cell % s.w);
        const int gy = static_cast<int>(cell / s.w);
        const double tx = v[idx(classes + 1)], ty = v[idx(classes + 2)];
        const double tw = v[idx(classes + 3)], th = v[idx(classes + 4)];
        const auto box = detail::decode_cell(tx, ty, tw, th, gx, gy, kStrides[l]);
        const auto term = detail::giou_loss(box, target.box);
        total += term.loss;
        // Chain through x1 = cx - w/2, x2 = cx + w/2 and the sigmoid parametrisation.
        const int stride = kStrides[l];
        const double sx = detail::sigmoid_value(tx), sy = detail::sigmoid_value(ty);
        const double sw = detail::sigmoid_value(tw), sh = detail::sigmoid_value(th);
        const double dcx = term.d[0] + term.d[2];
        const double dcy = term.d[1] + term.d[3];
        const double dw = (term.d[2] - term.d[0]) / 2;
        const double dh = (term.d[3] - term.d[1]) / 2;
        g[idx(classes + 1)] = static_cast<T>(dcx * 2 * stride * sx * (1 - sx) * inv_batch);
        g[idx(classes + 2)] = static_cast<T>(dcy * 2 * stride * sy * (1 - sy) * inv_batch);
        g[idx(classes + 3)] = static_cast<T>(dw * 16.0 * stride * sw * sw * (1 - sw) * inv_batch);
        g[idx(classes + 4)] = static_cast<T>(dh * 16.0 * stride * sh * sh * (1 - sh) * inv_batch);
      }
    }
  }
  auto h0 = head[0].handle(), h1 = head[1].handle(), h2 = head[2].handle();
  return make_result<T>(Shape{}, {static_cast<T>(total * inv_batch)}, {&head[0], &head[1], &head[2]},
                        [h0, h1, h2, grads = std::move(grads)](Node<T>& self) {
                          const std::array<std::shared_ptr<Node<T>>, 3> hs{h0, h1, h2};
                          for (int l = 0; l < 3; ++l) {
                            T* d = grad_target(hs[l]);
                            if (!d) continue;
                            for (std::size_t i = 0; i < grads[l].size(); ++i) d[i] += self.grad[0] * grads[l][i];
                          }
                        });
}

struct DecodeOptions {
  double conf_threshold = 0.05;
  double iou_threshold = 0.5;
  int max_detections = 100;
};

// Greedy per-class NMS; survivors sorted by descending confidence.
inline std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double iou_threshold) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const Detection& a, const Detection& b) {
    return std::tie(b.confidence, a.box.xmin, a.box.ymin, a.box.xmax, a.box.ymax) <
           std::tie(a.confidence, b.box.xmin, b.box.ymin, b.box.xmax, b.box.ymax);
  });
  std::vector<Detection> kept;
  for (const auto& c : candidates) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == c.class_id && iou(k.box, c.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

// One label per cell: the best class, scored sig(obj) * sig(cls).
template <typename T>
std::vector<std::vector<Detection>> decode_and_nms(const std::array<Tensor<T>, 3>& head, int image_w, int image_h,
                                                   const DecodeOptions& opt = {}) {
  if (opt.conf_threshold < 0 || opt.conf_threshold > 1 || opt.iou_threshold < 0 || opt.iou_threshold > 1) {
    throw InvalidArgument("decode_and_nms: thresholds must lie in [0,1]");
  }
  const int batch = head[0].shape().n;
  const int classes = head[0].shape().c - 5;
  std::vector<std::vector<Detection>> out(batch);
  for (int n = 0; n < batch; ++n) {
    std::vector<Detection> cand;
    for (int l = 0; l < 3; ++l) {
      const Shape s = head[l].shape();
      for (int gy = 0; gy < s.h; ++gy)
        for (int gx = 0; gx < s.w; ++gx) {
          const double obj = detail::sigmoid_value(static_cast<double>(head[l].at(n, classes, gy, gx)));
          int best = 0;
          double best_p = -1;
          for (int k = 0; k < classes; ++k) {
            const double p = detail::sigmoid_value(static_cast<double>(head[l].at(n, k, gy, gx)));
            if (p > best_p) {
              best_p = p;
              best = k;
            }
          }
          const double score = obj * best_p;
          if (score < opt.conf_threshold || score <= 0) continue;
          auto b = detail::decode_cell(head[l].at(n, classes + 1, gy, gx), head[l].at(n, classes + 2, gy, gx),
                                       head[l].at(n, classes + 3, gy, gx), head[l].at(n, classes + 4, gy, gx), gx,
                                       gy, kStrides[l]);
          Box box{std::clamp(b.x1, 0.0, double(image_w)), std::clamp(b.y1, 0.0, double(image_h)),
                  std::clamp(b.x2, 0.0, double(image_w)), std::clamp(b.y2, 0.0, double(image_h))};
          if (!box.valid()) continue;
          cand.push_back(Detection{best, box, score});
        }
    }
    auto kept = non_max_suppression(std::move(cand), opt.iou_threshold);
    if (static_cast<int>(kept.size()) > opt.max_detections) kept.resize(opt.max_detections);
    out[n] = std::move(kept);
  }
  return out;
}

// ---------------------------------------------------------------------------

// Copies values between identically named parameters; shapes must agree.
template <typename T, typename U>
void copy_parameter_values(const ParameterList<T>& dst, const ParameterList<U>& src) {
  for (const auto& d : dst) {
    auto it = std::find_if(src.begin(), src.end(), [&](const auto& s) { return s.name == d.name; });
    if (it == src.end()) throw InvalidArgument("copy_parameter_values: no source for " + d.name);
    if (!(it->tensor.shape() == d.tensor.shape())) {
      throw InvalidArgument("copy_parameter_values: shape mismatch for " + d.name);
    }
    auto to = Tensor<T>(d.tensor).mutable_data();
    const auto from = it->tensor.data();
    std::transform(from.begin(), from.end(), to.begin(), [](U v) { return static_cast<T>(v); });
  }
}

// Backbone copy plus per-level 1x1 channel matchers. All parameters are
// frozen: the extractor only supplies targets.
template <typename T>
class ClearFeatureExtractor {
 public:
  ClearFeatureExtractor() = default;
  ClearFeatureExtractor(const DetectorConfig& cfg, Rng& rng) : backbone_(cfg, rng) {
    for (int l = 0; l < 3; ++l) {
      const int c = cfg.channels[l];
      matchers_[l] = Conv2d<T>(c, c, 1, 1, 0, rng);
      auto w = matchers_[l].weight().mutable_data();
      std::fill(w.begin(), w.end(), T(0));
      for (int i = 0; i < c; ++i) w[static_cast<std::size_t>(i) * c + i] = T(1);
    }
    ParameterList<T> ps;
    collect(ps, "");
    for (auto& p : ps) p.tensor.set_requires_grad(false);
  }

  FeaturePyramid<T> forward(const Tensor<T>& clean) const {
    auto f = backbone_.forward(clean);
    for (int l = 0; l < 3; ++l) f.levels[l] = matchers_[l].forward(f.levels[l]);
    f.role = FeatureRole::clear;
    return f;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    backbone_.collect(out, prefix + ".backbone");
    for (int l = 0; l < 3; ++l) matchers_[l].collect(out, prefix + ".match" + std::to_string(l + 3));
  }

  // Copies pretrained backbone weights in; the copies stay frozen.
  void load_backbone(const Backbone<T>& src) {
    ParameterList<T> from, to;
    src.collect(from, "b");
    backbone_.collect(to, "b");
    copy_parameter_values(to, from);
  }

 private:
  Backbone<T> backbone_;
  std::array<Conv2d<T>, 3> matchers_;
};

template <typename T>
class DYolo {
 public:
  struct Output {
    std::array<Tensor<T>, 3> head;
    FeaturePyramid<T> hazy;
    std::optional<FeaturePyramid<T>> clear;
    std::optional<FeaturePyramid<T>> dehazed;
    FeaturePyramid<T> fused;
  };

  DYolo(const DetectorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    backbone_ = Backbone<T>(cfg, rng);
    head_ = DetectionHead<T>(cfg, rng);
    if (cfg.use_fa) {
      for (int l = 0; l < 3; ++l) {
        fa_[l] = FAStack<T>(FAStackOptions{.channels = cfg.channels[l],
                                           .conv_kind = cfg.conv_kind,
                                           .kernel_count = cfg.od_kernels,
                                           .reduction = cfg.od_reduction},
                            rng);
      }
    }
    if (cfg.use_af) {
      for (int l = 0; l < 3; ++l) af_[l] = AttentionFusion<T>(AFOptions{cfg.channels[l], cfg.fusion_pool}, rng);
    }
    if (cfg.use_cfe) cfe_ = ClearFeatureExtractor<T>(cfg, rng);
  }

  const DetectorConfig& config() const { return cfg_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  // While distilling, training forwards must receive the clean image.
  void set_distilling(bool on) { distilling_ = on; }
  bool distilling() const { return distilling_; }

  std::size_t cfe_evaluations() const { return cfe_evaluations_; }

  void load_cfe_backbone(const Backbone<T>& pretrained) {
    if (!cfg_.use_cfe) throw StateError("load_cfe_backbone: model built without a clear feature branch");
    cfe_.load_backbone(pretrained);
    cfe_pretrained_ = true;
  }
  bool cfe_pretrained() const { return cfe_pretrained_; }
  void mark_cfe_pretrained(bool on) { cfe_pretrained_ = on; }

  FeaturePyramid<T> cfe_forward(const Tensor<T>& clean) const {
    if (!training_) throw StateError("cfe_forward: the clear feature branch is training-only");
    if (!cfg_.use_cfe) throw StateError("cfe_forward: model built without a clear feature branch");
    ++cfe_evaluations_;
    NoGradGuard guard;
    return cfe_.forward(clean);
  }

  Output forward(const Tensor<T>& hazy, const Tensor<T>* clean = nullptr) const {
    const bool want_clear = training_ && cfg_.use_cfe && distilling_;
    if (want_clear && clean == nullptr) {
      throw InvalidArgument("DYolo::forward: clean image required while distilling");
    }
    Output out;
    out.hazy = backbone_.forward(hazy);
    if (want_clear) {
      if (!(clean->shape() == hazy.shape())) throw InvalidArgument("DYolo::forward: clean/hazy shapes differ");
      out.clear = cfe_forward(*clean);
    }
    if (cfg_.use_fa) {
      FeaturePyramid<T> d;
      d.role = FeatureRole::dehazed;
      for (int l = 0; l < 3; ++l) d.levels[l] = fa_[l].forward(out.hazy.levels[l]);
      out.dehazed = d;
    }
    out.fused.role = FeatureRole::fused;
    for (int l = 0; l < 3; ++l) {
      if (cfg_.use_af) out.fused.levels[l] = af_[l].forward(out.dehazed->levels[l], out.hazy.levels[l]);
      else if (cfg_.dual_branch) out.fused.levels[l] = add(out.dehazed->levels[l], out.hazy.levels[l]);
      else if (cfg_.use_fa) out.fused.levels[l] = out.dehazed->levels[l];
      else out.fused.levels[l] = out.hazy.levels[l];
    }
    out.head = head_.forward(out.fused);
    return out;
  }

  // Distillation loss for the current output, or an undefined tensor when
  // no clear features were produced. Without FA the hazy features are the
  // student.
  Tensor<T> adaption_loss(const Output& out, const AdaptionLossConfig& cfg) const {
    if (!out.clear) return {};
    const auto& student = out.dehazed ? *out.dehazed : out.hazy;
    return multiscale_adaption_loss(out.clear->as_vector(), student.as_vector(), cfg);
  }

  std::vector<std::vector<Detection>> detect(const Tensor<T>& hazy, const DecodeOptions& opt = {}) const {
    NoGradGuard guard;
    const auto out = forward(hazy);
    return decode_and_nms(out.head, hazy.shape().w, hazy.shape().h, opt);
  }

  // Names are prefixed backbone., head., fa.pN., af.pN., cfe.
  ParameterList<T> parameters() const {
    ParameterList<T> ps = inference_parameters();
    if (cfg_.use_cfe) cfe_.collect(ps, "cfe");
    return ps;
  }

  ParameterList<T> inference_parameters() const {
    ParameterList<T> ps;
    backbone_.collect(ps, "backbone");
    head_.collect(ps, "head");
    for (int l = 0; l < 3; ++l) {
      if (cfg_.use_fa) fa_[l].collect(ps, "fa.p" + std::to_string(l + 3));
      if (cfg_.use_af) af_[l].collect(ps, "af.p" + std::to_string(l + 3));
    }
    return ps;
  }

  static bool is_cfe_parameter(const std::string& name) { return name.rfind("cfe.", 0) == 0; }
  static bool is_fa_parameter(const std::string& name) { return name.rfind("fa.", 0) == 0; }

  Backbone<T>& backbone() { return backbone_; }
  DetectionHead<T>& head() { return head_; }
  AttentionFusion<T>& fusion(int level) { return af_.at(level); }

 private:
  DetectorConfig cfg_;
  Backbone<T> backbone_;
  DetectionHead<T> head_;
  std::array<FAStack<T>, 3> fa_;
  std::array<AttentionFusion<T>, 3> af_;
  ClearFeatureExtractor<T> cfe_;
  bool training_ = true;
  bool distilling_ = true;
  bool cfe_pretrained_ = false;
  mutable std::size_t cfe_evaluations_ = 0;
};

}  // namespace dyolo
