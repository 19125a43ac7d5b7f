#pragma once

// Feature adaption stack and the distillation losses that pull adapted
// (student) features toward clear (teacher) features.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dyolo/odconv.hpp"

namespace dyolo {

struct FAStackOptions {
  int channels = 0;
  ConvKind conv_kind = ConvKind::od;
  int kernel_count = 4;
  double reduction = 0.25;
  int cbam_reduction = 16;
};

// ODConv_1 (C->C) -> SiLU -> ODConv_2 (C->2C) -> SiLU -> CBAM(2C) -> 1x1 proj (2C->C).
template <typename T>
class FAStack {
 public:
  FAStack() = default;
  FAStack(const FAStackOptions& opt, Rng& rng) : channels_(opt.channels) {
    ODConvOptions first{.in_channels = opt.channels,
                        .out_channels = opt.channels,
                        .kernel_count = opt.kernel_count,
                        .reduction = opt.reduction};
    ODConvOptions second = first;
    second.out_channels = 2 * opt.channels;
    conv1_ = AdaptiveConv<T>(opt.conv_kind, first, rng);
    conv2_ = AdaptiveConv<T>(opt.conv_kind, second, rng);
    cbam_ = CBAM<T>(CBAMOptions{.channels = 2 * opt.channels, .reduction = opt.cbam_reduction}, rng);
    proj_ = Conv2d<T>(2 * opt.channels, opt.channels, 1, 1, 0, rng);
    // CBAM's two gates start near 0.5 each; compensate so F_d starts on the
    // scale of F_h.
    for (T& w : proj_.weight().mutable_data()) w *= T(4);
  }

  Tensor<T> forward(const Tensor<T>& hazy) const {
    if (hazy.shape().c != channels_) {
      detail::raise<InvalidArgument>("FAStack", "expected " + std::to_string(channels_) +
                                                    " channels, got " + hazy.shape().str());
    }
    const auto h1 = silu(conv1_.forward(hazy));
    const auto h2 = silu(conv2_.forward(h1));
    return proj_.forward(cbam_.forward(h2));
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    conv1_.collect(out, prefix + ".conv1");
    conv2_.collect(out, prefix + ".conv2");
    cbam_.collect(out, prefix + ".cbam");
    proj_.collect(out, prefix + ".proj");
  }

  int channels() const { return channels_; }

 private:
  int channels_ = 0;
  AdaptiveConv<T> conv1_;
  AdaptiveConv<T> conv2_;
  CBAM<T> cbam_;
  Conv2d<T> proj_;
};

enum class AdaptionLossKind { cwd, mimic_l1, mimic_l2 };

inline const char* to_string(AdaptionLossKind k) {
  switch (k) {
    case AdaptionLossKind::cwd: return "cwd";
    case AdaptionLossKind::mimic_l1: return "mimic_l1";
    case AdaptionLossKind::mimic_l2: return "mimic_l2";
  }
  return "?";
}

inline AdaptionLossKind adaption_loss_kind_from_string(const std::string& s) {
  if (s == "cwd") return AdaptionLossKind::cwd;
  if (s == "mimic_l1") return AdaptionLossKind::mimic_l1;
  if (s == "mimic_l2") return AdaptionLossKind::mimic_l2;
  throw ValidationError("unknown adaption loss '" + s + "' (expected cwd|mimic_l1|mimic_l2)");
}

struct AdaptionLossConfig {
  double tau = 1.0;
  std::array<double, 3> scale_weights{0.7, 0.2, 0.1};  // stride 8, 16, 32
  AdaptionLossKind kind = AdaptionLossKind::cwd;

  void validate() const {
    if (!(tau > 0)) throw InvalidArgument("adaption.tau must be > 0");
    double sum = 0;
    for (double w : scale_weights) {
      if (w < 0) throw InvalidArgument("adaption.scale_weights must be non-negative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("adaption.scale_weights must sum to 1");
  }
};

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (!(a.shape() == b.shape())) {
    raise<InvalidArgument>(where, "shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

// Log-softmax of a contiguous run of n values scaled by 1/tau.
template <typename T>
void log_softmax(const T* x, std::size_t n, T tau, T* out) {
  T m = x[0] / tau;
  for (std::size_t k = 1; k < n; ++k) m = std::max(m, x[k] / tau);
  T z = 0;
  for (std::size_t k = 0; k < n; ++k) z += std::exp(x[k] / tau - m);
  const T lz = m + std::log(z);
  for (std::size_t k = 0; k < n; ++k) out[k] = x[k] / tau - lz;
}

}  // namespace detail

// Channel-wise distillation: for each sample and channel, KL divergence
// between the spatial softmax of teacher/tau and student/tau; summed over
// channels, averaged over the batch, scaled by tau^2. The teacher receives
// no gradient.
template <typename T>
Tensor<T> cwd_loss(const Tensor<T>& teacher, const Tensor<T>& student, T tau) {
  detail::check_same_shape(teacher, student, "cwd_loss");
  if (!(tau > 0)) detail::raise<InvalidArgument>("cwd_loss", "tau must be > 0");
  const Shape s = teacher.shape();
  const std::size_t pl = s.plane();
  const std::size_t rows = static_cast<std::size_t>(s.n) * s.c;
  std::vector<T> lp(pl);
  std::vector<T> lq(pl);
  std::vector<T> q_minus_p(teacher.numel());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    detail::log_softmax(teacher.ptr() + r * pl, pl, tau, lp.data());
    detail::log_softmax(student.ptr() + r * pl, pl, tau, lq.data());
    T kl = 0;
    for (std::size_t k = 0; k < pl; ++k) {
      const T p = std::exp(lp[k]);
      kl += p * (lp[k] - lq[k]);
      q_minus_p[r * pl + k] = std::exp(lq[k]) - p;
    }
    total += kl;
  }
  const T value = total * tau * tau / static_cast<T>(s.n);
  auto sh = student.handle();
  const T coeff = tau / static_cast<T>(s.n);
  return make_result<T>(Shape{}, {value}, {&student},
                        [sh, coeff, q_minus_p = std::move(q_minus_p)](Node<T>& self) {
                          T* ds = grad_target(sh);
                          if (!ds) return;
                          const T g = self.grad[0] * coeff;
                          for (std::size_t i = 0; i < q_minus_p.size(); ++i) ds[i] += g * q_minus_p[i];
                        });
}

// Mean absolute (p = 1) or mean squared (p = 2) difference; teacher detached.
template <typename T>
Tensor<T> mimic_loss(const Tensor<T>& teacher, const Tensor<T>& student, int p) {
  detail::check_same_shape(teacher, student, "mimic_loss");
  if (p != 1 && p != 2) detail::raise<InvalidArgument>("mimic_loss", "p must be 1 or 2");
  const std::size_t count = teacher.numel();
  std::vector<T> diff(count);
  T acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    diff[i] = student.ptr()[i] - teacher.ptr()[i];
    acc += p == 1 ? std::abs(diff[i]) : diff[i] * diff[i];
  }
  auto sh = student.handle();
  return make_result<T>(Shape{}, {acc / static_cast<T>(count)}, {&student},
                        [sh, p, diff = std::move(diff)](Node<T>& self) {
                          T* ds = grad_target(sh);
                          if (!ds) return;
                          const T g = self.grad[0] / static_cast<T>(diff.size());
                          for (std::size_t i = 0; i < diff.size(); ++i) {
                            const T d = diff[i];
                            ds[i] += p == 1 ? g * static_cast<T>((d > 0) - (d < 0)) : g * T(2) * d;
                          }
                        });
}

template <typename T>
Tensor<T> adaption_loss(const Tensor<T>& teacher, const Tensor<T>& student,
                        const AdaptionLossConfig& cfg) {
  switch (cfg.kind) {
    case AdaptionLossKind::cwd: return cwd_loss(teacher, student, static_cast<T>(cfg.tau));
    case AdaptionLossKind::mimic_l1: return mimic_loss(teacher, student, 1);
    case AdaptionLossKind::mimic_l2: return mimic_loss(teacher, student, 2);
  }
  return {};
}

// Weighted sum over the three pyramid levels, finest level first.
template <typename T>
Tensor<T> multiscale_adaption_loss(const std::vector<Tensor<T>>& teacher,
                                   const std::vector<Tensor<T>>& student,
                                   const AdaptionLossConfig& cfg) {
  if (teacher.size() != 3 || student.size() != 3) {
    detail::raise<InvalidArgument>("multiscale_adaption_loss", "expected 3 pyramid levels");
  }
  cfg.validate();
  Tensor<T> total;
  for (std::size_t l = 0; l < 3; ++l) {
    auto term = scale(adaption_loss(teacher[l], student[l], cfg), static_cast<T>(cfg.scale_weights[l]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace dyolo
