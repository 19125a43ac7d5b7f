#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dyolo/ops.hpp"

namespace dyolo {

using Rng = std::mt19937_64;

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
Tensor<T> uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(shape.numel());
  for (T& x : v) x = static_cast<T>(dist(rng));
  auto t = Tensor<T>::from(shape, std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant_parameter(Shape shape, T value) {
  auto t = Tensor<T>::full(shape, value);
  t.set_requires_grad(true);
  return t;
}

// Standard convolution layer. He-uniform weights, zero bias.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool with_bias = true)
      : stride_(stride), pad_(pad) {
    if (in < 1 || out < 1 || kernel < 1) {
      detail::raise<InvalidArgument>("Conv2d", "channels and kernel must be positive");
    }
    const double fan_in = static_cast<double>(in) * kernel * kernel;
    weight_ = uniform_parameter<T>(Shape{out, in, kernel, kernel}, std::sqrt(6.0 / fan_in), rng);
    if (with_bias) bias_ = constant_parameter<T>(Shape{1, out, 1, 1}, T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", bias_});
  }

  int in_channels() const { return weight_.shape().c; }
  int out_channels() const { return weight_.shape().n; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  int stride_ = 1;
  int pad_ = 0;
};

template <typename T>
void collect_prefixed(ParameterList<T>& out, const ParameterList<T>& in, const std::string& prefix) {
  for (const auto& p : in) out.push_back({prefix + "." + p.name, p.tensor});
}

}  // namespace dyolo
