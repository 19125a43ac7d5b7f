#pragma once

// Attention feature fusion between dehazed (F_d) and hazy (F_h) features:
//   X   = F_d + F_h
//   T   = X + UP(conv_t(Pool_r(X)))
//   F_f = conv_d(F_d) * Sig(T) + conv_h(F_h) * (1 - Sig(T))

#include <optional>
#include <string>

#include "dyolo/nn.hpp"

namespace dyolo {

struct AFOptions {
  int channels = 0;
  int pool = 4;
};

template <typename T>
class AttentionFusion {
 public:
  AttentionFusion() = default;
  AttentionFusion(const AFOptions& opt, Rng& rng) : channels_(opt.channels), pool_(opt.pool) {
    if (opt.pool < 1) detail::raise<InvalidArgument>("AttentionFusion", "pool window must be >= 1");
    conv_t_ = Conv2d<T>(opt.channels, opt.channels, 3, 1, 1, rng);
    conv_d_ = Conv2d<T>(opt.channels, opt.channels, 3, 1, 1, rng);
    conv_h_ = Conv2d<T>(opt.channels, opt.channels, 3, 1, 1, rng);
  }

  // Pre-sigmoid attention logits T.
  Tensor<T> attention_logits(const Tensor<T>& dehazed, const Tensor<T>& hazy) const {
    check(dehazed, hazy);
    const auto x = add(dehazed, hazy);
    const auto ctx = conv_t_.forward(avg_pool(x, pool_));
    return add(x, upsample_bilinear(ctx, x.shape().h, x.shape().w));
  }

  Tensor<T> forward(const Tensor<T>& dehazed, const Tensor<T>& hazy) const {
    check(dehazed, hazy);
    Tensor<T> attn = forced_logit_
                         ? Tensor<T>::full(dehazed.shape(), detail::sigmoid_value(*forced_logit_))
                         : sigmoid(attention_logits(dehazed, hazy));
    if (invert_) attn = one_minus(attn);
    const auto d = identity_branches_ ? dehazed : conv_d_.forward(dehazed);
    const auto h = identity_branches_ ? hazy : conv_h_.forward(hazy);
    return add(mul(d, attn), mul(h, one_minus(attn)));
  }

  // Test hooks.
  void set_identity_branches(bool on) { identity_branches_ = on; }
  void force_logit(std::optional<T> value) { forced_logit_ = value; }
  void invert_attention(bool on) { invert_ = on; }

  void swap_branch_convs() { std::swap(conv_d_, conv_h_); }

  int pool() const { return pool_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    conv_t_.collect(out, prefix + ".conv_t");
    conv_d_.collect(out, prefix + ".conv_d");
    conv_h_.collect(out, prefix + ".conv_h");
  }

 private:
  void check(const Tensor<T>& a, const Tensor<T>& b) const {
    if (!(a.shape() == b.shape())) {
      detail::raise<InvalidArgument>("AttentionFusion", "branch shapes differ: " + a.shape().str() +
                                                            " vs " + b.shape().str());
    }
    if (a.shape().c != channels_) {
      detail::raise<InvalidArgument>("AttentionFusion", "expected " + std::to_string(channels_) +
                                                            " channels, got " + a.shape().str());
    }
  }

  int channels_ = 0;
  int pool_ = 4;
  Conv2d<T> conv_t_;
  Conv2d<T> conv_d_;
  Conv2d<T> conv_h_;
  bool identity_branches_ = false;
  bool invert_ = false;
  std::optional<T> forced_logit_;
};

}  // namespace dyolo
