#pragma once

// Omni-dimensional dynamic convolution, its SE and plain counterparts used
// in the FA ablations, and the convolutional block attention module.

#include <algorithm>
#include <cmath>
#include <string>
#include <variant>

#include "dyolo/nn.hpp"

namespace dyolo {

// Aggregates n candidate kernels into one kernel per sample:
//   K[b,o,i,s] = spatial[b,s] * in_ch[b,i] * filter[b,o] * sum_j kernel[b,j] * W[j,o,i,s]
// spatial: N x 1 x k x k, in_ch: N x Ci x 1 x 1, filter: N x Co x 1 x 1,
// kernel: N x n x 1 x 1, W: n*Co x Ci x k x k. Result: N*Co x Ci x k x k.
template <typename T>
Tensor<T> aggregate_dynamic_kernel(const Tensor<T>& spatial, const Tensor<T>& in_ch,
                                   const Tensor<T>& filter, const Tensor<T>& kernel,
                                   const Tensor<T>& weights) {
  const int batch = spatial.shape().n;
  const int ks = spatial.shape().h * spatial.shape().w;
  const int ci = in_ch.shape().c;
  const int co = filter.shape().c;
  const int nk = kernel.shape().c;
  const Shape ws = weights.shape();
  if (ws.n != nk * co || ws.c != ci || ws.h * ws.w != ks) {
    detail::raise<InvalidArgument>("aggregate_dynamic_kernel",
                                   "kernel bank " + ws.str() + " inconsistent with attentions");
  }
  const std::size_t per_kernel = static_cast<std::size_t>(co) * ci * ks;

  // mixed[b] = sum_j kernel[b,j] * W[j]
  std::vector<T> mixed(static_cast<std::size_t>(batch) * per_kernel, T(0));
  std::vector<T> out(mixed.size());
  const T* sp = spatial.ptr();
  const T* cp = in_ch.ptr();
  const T* fp = filter.ptr();
  const T* kp = kernel.ptr();
  const T* wp = weights.ptr();
  for (int b = 0; b < batch; ++b) {
    T* m = mixed.data() + b * per_kernel;
    for (int j = 0; j < nk; ++j) {
      const T a = kp[b * nk + j];
      const T* wj = wp + j * per_kernel;
      for (std::size_t e = 0; e < per_kernel; ++e) m[e] += a * wj[e];
    }
    T* ob = out.data() + b * per_kernel;
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ci; ++i)
        for (int s = 0; s < ks; ++s) {
          const std::size_t e = (static_cast<std::size_t>(o) * ci + i) * ks + s;
          ob[e] = sp[b * ks + s] * cp[b * ci + i] * fp[b * co + o] * m[e];
        }
  }

  auto sh = spatial.handle();
  auto ch = in_ch.handle();
  auto fh = filter.handle();
  auto kh = kernel.handle();
  auto wh = weights.handle();
  return make_result<T>(
      Shape{batch * co, ci, ws.h, ws.w}, std::move(out), {&spatial, &in_ch, &filter, &kernel, &weights},
      [=, mixed = std::move(mixed)](Node<T>& self) {
        T* ds = grad_target(sh);
        T* dc = grad_target(ch);
        T* df = grad_target(fh);
        T* dk = grad_target(kh);
        T* dw = grad_target(wh);
        const T* sp = sh->value.data();
        const T* cp = ch->value.data();
        const T* fp = fh->value.data();
        const T* kp = kh->value.data();
        const T* wp = wh->value.data();
        std::vector<T> dmixed(per_kernel);
        for (int b = 0; b < batch; ++b) {
          const T* g = self.grad.data() + b * per_kernel;
          const T* m = mixed.data() + b * per_kernel;
          for (int o = 0; o < co; ++o)
            for (int i = 0; i < ci; ++i)
              for (int s = 0; s < ks; ++s) {
                const std::size_t e = (static_cast<std::size_t>(o) * ci + i) * ks + s;
                const T sv = sp[b * ks + s];
                const T cv = cp[b * ci + i];
                const T fv = fp[b * co + o];
                const T ge = g[e];
                if (ds) ds[b * ks + s] += ge * cv * fv * m[e];
                if (dc) dc[b * ci + i] += ge * sv * fv * m[e];
                if (df) df[b * co + o] += ge * sv * cv * m[e];
                dmixed[e] = ge * sv * cv * fv;
              }
          for (int j = 0; j < nk; ++j) {
            const T* wj = wp + j * per_kernel;
            if (dk) {
              T acc = 0;
              for (std::size_t e = 0; e < per_kernel; ++e) acc += dmixed[e] * wj[e];
              dk[b * nk + j] += acc;
            }
            if (dw) {
              const T a = kp[b * nk + j];
              T* dwj = dw + j * per_kernel;
              for (std::size_t e = 0; e < per_kernel; ++e) dwj[e] += a * dmixed[e];
            }
          }
        }
      });
}

struct ODConvOptions {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 1;
  int stride = 1;
  int padding = 0;
  int kernel_count = 4;
  double reduction = 0.25;
  int min_hidden = 4;
  // Multiplies the He bound of the kernel bank. Negative selects 8 sqrt(n),
  // which offsets the attention product at initialisation (three sigmoids
  // near 0.5, kernel weights near 1/n over independent kernels).
  double bank_gain = -1;
};

template <typename T>
class ODConv {
 public:
  struct Attentions {
    Tensor<T> spatial;     // N x 1 x k x k, sigmoid
    Tensor<T> in_channel;  // N x Ci x 1 x 1, sigmoid
    Tensor<T> filter;      // N x Co x 1 x 1, sigmoid
    Tensor<T> kernel;      // N x n x 1 x 1, softmax over n
  };

  ODConv() = default;
  ODConv(const ODConvOptions& opt, Rng& rng) : opt_(opt) {
    if (opt.kernel_count < 1) detail::raise<InvalidArgument>("ODConv", "kernel_count must be >= 1");
    if (opt.reduction <= 0) detail::raise<InvalidArgument>("ODConv", "reduction must be > 0");
    const int hidden =
        std::max(opt.min_hidden, static_cast<int>(std::lround(opt.in_channels * opt.reduction)));
    const int k = opt.kernel_size;
    squeeze_ = Conv2d<T>(opt.in_channels, hidden, 1, 1, 0, rng);
    spatial_head_ = Conv2d<T>(hidden, k * k, 1, 1, 0, rng);
    channel_head_ = Conv2d<T>(hidden, opt.in_channels, 1, 1, 0, rng);
    filter_head_ = Conv2d<T>(hidden, opt.out_channels, 1, 1, 0, rng);
    kernel_head_ = Conv2d<T>(hidden, opt.kernel_count, 1, 1, 0, rng);
    const double fan_in = static_cast<double>(opt.in_channels) * k * k;
    const double gain = opt.bank_gain >= 0 ? opt.bank_gain : 8.0 * std::sqrt(static_cast<double>(opt.kernel_count));
    bank_ = uniform_parameter<T>(Shape{opt.kernel_count * opt.out_channels, opt.in_channels, k, k},
                                 gain * std::sqrt(6.0 / fan_in), rng);
    bias_ = constant_parameter<T>(Shape{1, opt.out_channels, 1, 1}, T(0));
  }

  Attentions attentions(const Tensor<T>& x) const {
    check_input(x);
    const int batch = x.shape().n;
    const int k = opt_.kernel_size;
    if (pinned_) {
      return {Tensor<T>::full(Shape{batch, 1, k, k}, T(1)),
              Tensor<T>::full(Shape{batch, opt_.in_channels, 1, 1}, T(1)),
              Tensor<T>::full(Shape{batch, opt_.out_channels, 1, 1}, T(1)),
              Tensor<T>::full(Shape{batch, opt_.kernel_count, 1, 1}, T(1))};
    }
    const auto z = silu(squeeze_.forward(mean_hw(x)));
    return {reshape(sigmoid(spatial_head_.forward(z)), Shape{batch, 1, k, k}),
            sigmoid(channel_head_.forward(z)), sigmoid(filter_head_.forward(z)),
            softmax_c(kernel_head_.forward(z))};
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const auto a = attentions(x);
    const auto kernel = aggregate_dynamic_kernel(a.spatial, a.in_channel, a.filter, a.kernel, bank_);
    return conv2d_per_sample(x, kernel, bias_, opt_.stride, opt_.padding);
  }

  // Test hook: every attention becomes the constant 1.
  void pin_attentions(bool on) { pinned_ = on; }

  Tensor<T>& kernel_bank() { return bank_; }
  Tensor<T>& bias() { return bias_; }
  const ODConvOptions& options() const { return opt_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    squeeze_.collect(out, prefix + ".squeeze");
    spatial_head_.collect(out, prefix + ".spatial_head");
    channel_head_.collect(out, prefix + ".channel_head");
    filter_head_.collect(out, prefix + ".filter_head");
    kernel_head_.collect(out, prefix + ".kernel_head");
    out.push_back({prefix + ".bank", bank_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.shape().c != opt_.in_channels) {
      detail::raise<InvalidArgument>("ODConv", "expected " + std::to_string(opt_.in_channels) +
                                                   " input channels, got " + x.shape().str());
    }
  }

  ODConvOptions opt_;
  Conv2d<T> squeeze_;
  Conv2d<T> spatial_head_;
  Conv2d<T> channel_head_;
  Conv2d<T> filter_head_;
  Conv2d<T> kernel_head_;
  Tensor<T> bank_;
  Tensor<T> bias_;
  bool pinned_ = false;
};

// Convolution preceded by squeeze-excitation channel reweighting of its input.
template <typename T>
class SEConv {
 public:
  SEConv() = default;
  SEConv(const ODConvOptions& opt, Rng& rng) {
    const int hidden =
        std::max(opt.min_hidden, static_cast<int>(std::lround(opt.in_channels * opt.reduction)));
    squeeze_ = Conv2d<T>(opt.in_channels, hidden, 1, 1, 0, rng);
    excite_ = Conv2d<T>(hidden, opt.in_channels, 1, 1, 0, rng);
    conv_ = Conv2d<T>(opt.in_channels, opt.out_channels, opt.kernel_size, opt.stride, opt.padding, rng);
    for (T& w : conv_.weight().mutable_data()) w *= T(2);  // the gate starts near 0.5
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.shape().c != conv_.in_channels()) {
      detail::raise<InvalidArgument>("SEConv", "channel mismatch: " + x.shape().str());
    }
    const auto gate = sigmoid(excite_.forward(silu(squeeze_.forward(mean_hw(x)))));
    return conv_.forward(mul(x, gate));
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    squeeze_.collect(out, prefix + ".squeeze");
    excite_.collect(out, prefix + ".excite");
    conv_.collect(out, prefix + ".conv");
  }

 private:
  Conv2d<T> squeeze_;
  Conv2d<T> excite_;
  Conv2d<T> conv_;
};

enum class ConvKind { od, plain, se };

inline const char* to_string(ConvKind k) {
  switch (k) {
    case ConvKind::od: return "od";
    case ConvKind::plain: return "plain";
    case ConvKind::se: return "se";
  }
  return "?";
}

inline ConvKind conv_kind_from_string(const std::string& s) {
  if (s == "od") return ConvKind::od;
  if (s == "plain") return ConvKind::plain;
  if (s == "se") return ConvKind::se;
  throw ValidationError("unknown conv kind '" + s + "' (expected od|plain|se)");
}

// The convolution used inside FA, selected by ConvKind.
template <typename T>
class AdaptiveConv {
 public:
  AdaptiveConv() = default;
  AdaptiveConv(ConvKind kind, const ODConvOptions& opt, Rng& rng) {
    switch (kind) {
      case ConvKind::od: impl_ = ODConv<T>(opt, rng); break;
      case ConvKind::se: impl_ = SEConv<T>(opt, rng); break;
      case ConvKind::plain:
        impl_ = Conv2d<T>(opt.in_channels, opt.out_channels, opt.kernel_size, opt.stride,
                          opt.padding, rng);
        break;
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return std::visit([&](const auto& m) { return m.forward(x); }, impl_);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    std::visit([&](const auto& m) { m.collect(out, prefix); }, impl_);
  }

  ODConv<T>* as_odconv() { return std::get_if<ODConv<T>>(&impl_); }

 private:
  std::variant<Conv2d<T>, ODConv<T>, SEConv<T>> impl_;
};

struct CBAMOptions {
  int channels = 0;
  int reduction = 16;
  int spatial_kernel = 7;
};

template <typename T>
class CBAM {
 public:
  CBAM() = default;
  CBAM(const CBAMOptions& opt, Rng& rng) : channels_(opt.channels) {
    if (opt.channels < 1) detail::raise<InvalidArgument>("CBAM", "channels must be >= 1");
    const int hidden = std::max(1, opt.channels / opt.reduction);
    fc1_ = Conv2d<T>(opt.channels, hidden, 1, 1, 0, rng);
    fc2_ = Conv2d<T>(hidden, opt.channels, 1, 1, 0, rng);
    spatial_ = Conv2d<T>(2, 1, opt.spatial_kernel, 1, opt.spatial_kernel / 2, rng);
  }

  // N x C x 1 x 1 in (0,1); the bottleneck MLP is shared by both poolings.
  Tensor<T> channel_attention(const Tensor<T>& x) const {
    check(x);
    const auto avg = fc2_.forward(relu(fc1_.forward(mean_hw(x))));
    const auto mx = fc2_.forward(relu(fc1_.forward(max_hw(x))));
    return sigmoid(add(avg, mx));
  }

  // N x 1 x H x W in (0,1).
  Tensor<T> spatial_attention(const Tensor<T>& x) const {
    return sigmoid(spatial_.forward(concat_c(mean_c(x), max_c(x))));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const auto refined = mul(x, channel_attention(x));
    return mul(refined, spatial_attention(refined));
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    fc1_.collect(out, prefix + ".fc1");
    fc2_.collect(out, prefix + ".fc2");
    spatial_.collect(out, prefix + ".spatial");
  }

 private:
  void check(const Tensor<T>& x) const {
    if (x.shape().c != channels_) {
      detail::raise<InvalidArgument>("CBAM", "expected " + std::to_string(channels_) +
                                                 " channels, got " + x.shape().str());
    }
  }

  int channels_ = 0;
  Conv2d<T> fc1_;
  Conv2d<T> fc2_;
  Conv2d<T> spatial_;
};

}  // namespace dyolo
