#pragma once

// Differentiable primitives on NCHW tensors. Each op computes its forward
// value eagerly and, when recording, attaches a closure that accumulates
// input gradients from the output gradient.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dyolo/tensor.hpp"

namespace dyolo {

namespace detail {

template <typename T>
using AlignedBuffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename T>
void im2col(const T* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const int p = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, T* dx) {
  const int p = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

// Shared implementation for static kernels (Co x Ci x k x k) and
// per-sample kernels (N*Co x Ci x k x k).
template <typename T>
Tensor<T> conv2d_impl(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                      int stride, int pad, bool per_sample) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int k = ws.h;
  if (ws.h != ws.w) raise<InvalidArgument>("conv2d", "non-square kernel " + ws.str());
  if (ws.c != xs.c) {
    raise<InvalidArgument>("conv2d", "input channels " + std::to_string(xs.c) +
                                         " do not match kernel " + ws.str());
  }
  const int co = per_sample ? ws.n / xs.n : ws.n;
  if (per_sample && ws.n != xs.n * co) {
    raise<InvalidArgument>("conv2d", "per-sample kernel " + ws.str() + " for batch " + xs.str());
  }
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(co)) {
    raise<InvalidArgument>("conv2d", "bias length does not match output channels");
  }
  if (stride < 1 || pad < 0) raise<InvalidArgument>("conv2d", "bad stride/padding");
  const int ho = conv_out(xs.h, k, stride, pad);
  const int wo = conv_out(xs.w, k, stride, pad);
  if (ho < 1 || wo < 1) raise<InvalidArgument>("conv2d", "kernel larger than padded input");

  const int kk = xs.c * k * k;
  const int p = ho * wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  const Shape os{xs.n, co, ho, wo};
  std::vector<T> out(os.numel());
  // Eigen's vectorised kernels peel by address alignment, so every operand
  // goes through aligned scratch to keep results independent of heap layout.
  AlignedBuffer<T> col(static_cast<std::size_t>(kk) * p);
  AlignedBuffer<T> wbuf(static_cast<std::size_t>(co) * kk);
  AlignedBuffer<T> ybuf(static_cast<std::size_t>(co) * p);

  const T* xp = x.ptr();
  const T* wp = weight.ptr();
  for (int b = 0; b < xs.n; ++b) {
    const T* xb = xp + static_cast<std::size_t>(b) * xs.c * xs.plane();
    if (direct) {
      std::copy(xb, xb + col.size(), col.begin());
    } else {
      im2col(xb, xs.c, xs.h, xs.w, k, stride, pad, ho, wo, col.data());
    }
    if (b == 0 || per_sample) {
      const T* wb = wp + (per_sample ? static_cast<std::size_t>(b) * co * kk : 0);
      std::copy(wb, wb + wbuf.size(), wbuf.begin());
    }
    Eigen::Map<const RowMat<T>, Eigen::Aligned> wm(wbuf.data(), co, kk);
    Eigen::Map<const RowMat<T>, Eigen::Aligned> cm(col.data(), kk, p);
    Eigen::Map<RowMat<T>, Eigen::Aligned> ym(ybuf.data(), co, p);
    ym.noalias() = wm * cm;
    T* yb = out.data() + static_cast<std::size_t>(b) * co * p;
    std::copy(ybuf.begin(), ybuf.end(), yb);
    if (bias.defined()) {
      const T* bp = bias.ptr();
      for (int o = 0; o < co; ++o)
        for (int i = 0; i < p; ++i) yb[static_cast<std::size_t>(o) * p + i] += bp[o];
    }
  }

  auto xh = x.handle();
  auto wh = weight.handle();
  auto bh = bias.defined() ? bias.handle() : nullptr;
  return make_result<T>(
      os, std::move(out), {&x, &weight, &bias},
      [xh, wh, bh, xs, k, stride, pad, ho, wo, co, kk, p, direct, per_sample](Node<T>& self) {
        T* dx = grad_target(xh);
        T* dw = grad_target(wh);
        T* db = grad_target(bh);
        AlignedBuffer<T> col(static_cast<std::size_t>(kk) * p);
        AlignedBuffer<T> dcol(static_cast<std::size_t>(kk) * p);
        AlignedBuffer<T> dybuf(static_cast<std::size_t>(co) * p);
        AlignedBuffer<T> wbuf(static_cast<std::size_t>(co) * kk);
        AlignedBuffer<T> dwbuf(static_cast<std::size_t>(co) * kk);
        for (int b = 0; b < xs.n; ++b) {
          const T* xb = xh->value.data() + static_cast<std::size_t>(b) * xs.c * xs.plane();
          const T* g = self.grad.data() + static_cast<std::size_t>(b) * co * p;
          std::copy(g, g + dybuf.size(), dybuf.begin());
          Eigen::Map<const RowMat<T>, Eigen::Aligned> dy(dybuf.data(), co, p);
          const std::size_t woff = per_sample ? static_cast<std::size_t>(b) * co * kk : 0;
          if (db) {
            for (int o = 0; o < co; ++o) {
              T acc = 0;
              for (int i = 0; i < p; ++i) acc += g[static_cast<std::size_t>(o) * p + i];
              db[o] += acc;
            }
          }
          if (dw) {
            if (direct) {
              std::copy(xb, xb + col.size(), col.begin());
            } else {
              im2col(xb, xs.c, xs.h, xs.w, k, stride, pad, ho, wo, col.data());
            }
            Eigen::Map<const RowMat<T>, Eigen::Aligned> cm(col.data(), kk, p);
            Eigen::Map<RowMat<T>, Eigen::Aligned> dwm(dwbuf.data(), co, kk);
            dwm.noalias() = dy * cm.transpose();
            T* dwb = dw + woff;
            for (std::size_t i = 0; i < dwbuf.size(); ++i) dwb[i] += dwbuf[i];
          }
          if (dx) {
            if (b == 0 || per_sample) {
              const T* wb = wh->value.data() + woff;
              std::copy(wb, wb + wbuf.size(), wbuf.begin());
            }
            Eigen::Map<const RowMat<T>, Eigen::Aligned> wm(wbuf.data(), co, kk);
            Eigen::Map<RowMat<T>, Eigen::Aligned> dcm(dcol.data(), kk, p);
            dcm.noalias() = wm.transpose() * dy;
            T* dxb = dx + static_cast<std::size_t>(b) * xs.c * xs.plane();
            if (direct) {
              for (std::size_t i = 0; i < dcol.size(); ++i) dxb[i] += dcol[i];
            } else {
              col2im(dcol.data(), xs.c, xs.h, xs.w, k, stride, pad, ho, wo, dxb);
            }
          }
        }
      });
}

struct Broadcast {
  Shape out;
  std::size_t sa[4];
  std::size_t sb[4];

  static std::size_t stride_for(const Shape& s, int dim) {
    switch (dim) {
      case 0: return static_cast<std::size_t>(s.c) * s.h * s.w;
      case 1: return static_cast<std::size_t>(s.h) * s.w;
      case 2: return static_cast<std::size_t>(s.w);
      default: return 1;
    }
  }

  Broadcast(const Shape& a, const Shape& b, const char* op) {
    const int ad[4] = {a.n, a.c, a.h, a.w};
    const int bd[4] = {b.n, b.c, b.h, b.w};
    int od[4];
    for (int d = 0; d < 4; ++d) {
      if (ad[d] != bd[d] && ad[d] != 1 && bd[d] != 1) {
        raise<InvalidArgument>(op, "cannot broadcast " + a.str() + " with " + b.str());
      }
      od[d] = std::max(ad[d], bd[d]);
      sa[d] = ad[d] == 1 ? 0 : stride_for(a, d);
      sb[d] = bd[d] == 1 ? 0 : stride_for(b, d);
    }
    out = Shape{od[0], od[1], od[2], od[3]};
  }

  template <typename F>
  void for_each(F&& f) const {
    std::size_t o = 0;
    for (int n = 0; n < out.n; ++n)
      for (int c = 0; c < out.c; ++c)
        for (int h = 0; h < out.h; ++h) {
          const std::size_t ba = n * sa[0] + c * sa[1] + h * sa[2];
          const std::size_t bb = n * sb[0] + c * sb[1] + h * sb[2];
          for (int w = 0; w < out.w; ++w, ++o) f(o, ba + w * sa[3], bb + w * sb[3]);
        }
  }
};

}  // namespace detail

// Cross-correlation with a static kernel; bias may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {},
                 int stride = 1, int pad = 0) {
  return detail::conv2d_impl(x, weight, bias, stride, pad, false);
}

// Each sample b is convolved with its own kernel block weight[b*Co:(b+1)*Co].
template <typename T>
Tensor<T> conv2d_per_sample(const Tensor<T>& x, const Tensor<T>& weight,
                            const Tensor<T>& bias = {}, int stride = 1, int pad = 0) {
  return detail::conv2d_impl(x, weight, bias, stride, pad, true);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc(a.shape(), b.shape(), "add");
  std::vector<T> out(bc.out.numel());
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = ap[ia] + bp[ib]; });
  auto ah = a.handle();
  auto bh = b.handle();
  return make_result<T>(bc.out, std::move(out), {&a, &b}, [ah, bh, bc](Node<T>& self) {
    T* da = grad_target(ah);
    T* db = grad_target(bh);
    const T* g = self.grad.data();
    bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (da) da[ia] += g[o];
      if (db) db[ib] += g[o];
    });
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc(a.shape(), b.shape(), "sub");
  std::vector<T> out(bc.out.numel());
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = ap[ia] - bp[ib]; });
  auto ah = a.handle();
  auto bh = b.handle();
  return make_result<T>(bc.out, std::move(out), {&a, &b}, [ah, bh, bc](Node<T>& self) {
    T* da = grad_target(ah);
    T* db = grad_target(bh);
    const T* g = self.grad.data();
    bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (da) da[ia] += g[o];
      if (db) db[ib] -= g[o];
    });
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc(a.shape(), b.shape(), "mul");
  std::vector<T> out(bc.out.numel());
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = ap[ia] * bp[ib]; });
  auto ah = a.handle();
  auto bh = b.handle();
  return make_result<T>(bc.out, std::move(out), {&a, &b}, [ah, bh, bc](Node<T>& self) {
    T* da = grad_target(ah);
    T* db = grad_target(bh);
    const T* g = self.grad.data();
    const T* av = ah->value.data();
    const T* bv = bh->value.data();
    bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (da) da[ia] += g[o] * bv[ib];
      if (db) db[ib] += g[o] * av[ia];
    });
  });
}

namespace detail {

// y = f(x) elementwise; dydx(x, y) gives the local derivative.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dydx) {
  std::vector<T> out(x.numel());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xp[i]);
  auto xh = x.handle();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xh, dydx](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    const T* g = self.grad.data();
    const T* xv = xh->value.data();
    const T* yv = self.value.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += g[i] * dydx(xv[i], yv[i]);
  });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * detail::sigmoid_value(v); },
      [](T v, T) {
        const T s = detail::sigmoid_value(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// 1 - x
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    detail::raise<InvalidArgument>("reshape", x.shape().str() + " -> " + shape.str());
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xh = x.handle();
  return make_result<T>(shape, std::move(out), {&x}, [xh](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xh = x.handle();
  return make_result<T>(Shape{}, {acc}, {&x}, [xh](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    for (std::size_t i = 0; i < xh->value.size(); ++i) dx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// N x C x H x W -> N x C x 1 x 1
template <typename T>
Tensor<T> mean_hw(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t pl = s.plane();
  std::vector<T> out(static_cast<std::size_t>(s.n) * s.c);
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < pl; ++j) acc += xp[i * pl + j];
    out[i] = acc / static_cast<T>(pl);
  }
  auto xh = x.handle();
  return make_result<T>(Shape{s.n, s.c, 1, 1}, std::move(out), {&x}, [xh, pl](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T g = self.grad[i] / static_cast<T>(pl);
      for (std::size_t j = 0; j < pl; ++j) dx[i * pl + j] += g;
    }
  });
}

// N x C x H x W -> N x C x 1 x 1; gradient routed to the first maximum.
template <typename T>
Tensor<T> max_hw(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t pl = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * s.c;
  std::vector<T> out(count);
  std::vector<std::size_t> arg(count);
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t best = i * pl;
    for (std::size_t j = 1; j < pl; ++j) {
      if (xp[i * pl + j] > xp[best]) best = i * pl + j;
    }
    arg[i] = best;
    out[i] = xp[best];
  }
  auto xh = x.handle();
  return make_result<T>(Shape{s.n, s.c, 1, 1}, std::move(out), {&x},
                        [xh, arg = std::move(arg)](Node<T>& self) {
                          T* dx = grad_target(xh);
                          if (!dx) return;
                          for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += self.grad[i];
                        });
}

// N x C x H x W -> N x 1 x H x W
template <typename T>
Tensor<T> mean_c(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t pl = s.plane();
  std::vector<T> out(static_cast<std::size_t>(s.n) * pl, T(0));
  const T* xp = x.ptr();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t j = 0; j < pl; ++j) out[n * pl + j] += xp[(n * s.c + c) * pl + j];
  for (T& v : out) v /= static_cast<T>(s.c);
  auto xh = x.handle();
  return make_result<T>(Shape{s.n, 1, s.h, s.w}, std::move(out), {&x}, [xh, s, pl](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (std::size_t j = 0; j < pl; ++j)
          dx[(n * s.c + c) * pl + j] += self.grad[n * pl + j] / static_cast<T>(s.c);
  });
}

// N x C x H x W -> N x 1 x H x W; gradient routed to the first maximum.
template <typename T>
Tensor<T> max_c(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t pl = s.plane();
  std::vector<T> out(static_cast<std::size_t>(s.n) * pl);
  std::vector<std::size_t> arg(out.size());
  const T* xp = x.ptr();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t j = 0; j < pl; ++j) {
      std::size_t best = static_cast<std::size_t>(n) * s.c * pl + j;
      for (int c = 1; c < s.c; ++c) {
        const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * pl + j;
        if (xp[idx] > xp[best]) best = idx;
      }
      arg[n * pl + j] = best;
      out[n * pl + j] = xp[best];
    }
  auto xh = x.handle();
  return make_result<T>(Shape{s.n, 1, s.h, s.w}, std::move(out), {&x},
                        [xh, arg = std::move(arg)](Node<T>& self) {
                          T* dx = grad_target(xh);
                          if (!dx) return;
                          for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> concat_c(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    detail::raise<InvalidArgument>("concat_c", as.str() + " vs " + bs.str());
  }
  const std::size_t pl = as.plane();
  const std::size_t na = as.c * pl;
  const std::size_t nb = bs.c * pl;
  std::vector<T> out(static_cast<std::size_t>(as.n) * (na + nb));
  for (int n = 0; n < as.n; ++n) {
    std::copy_n(a.ptr() + n * na, na, out.begin() + n * (na + nb));
    std::copy_n(b.ptr() + n * nb, nb, out.begin() + n * (na + nb) + na);
  }
  auto ah = a.handle();
  auto bh = b.handle();
  return make_result<T>(Shape{as.n, as.c + bs.c, as.h, as.w}, std::move(out), {&a, &b},
                        [ah, bh, na, nb, batch = as.n](Node<T>& self) {
                          T* da = grad_target(ah);
                          T* db = grad_target(bh);
                          for (int n = 0; n < batch; ++n) {
                            const T* g = self.grad.data() + n * (na + nb);
                            if (da)
                              for (std::size_t i = 0; i < na; ++i) da[n * na + i] += g[i];
                            if (db)
                              for (std::size_t i = 0; i < nb; ++i) db[n * nb + i] += g[na + i];
                          }
                        });
}

// Softmax across the channel axis at every (n, h, w).
template <typename T>
Tensor<T> softmax_c(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t pl = s.plane();
  std::vector<T> out(x.numel());
  const T* xp = x.ptr();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t j = 0; j < pl; ++j) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * pl + j;
      T m = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < s.c; ++c) m = std::max(m, xp[base + c * pl]);
      T z = 0;
      for (int c = 0; c < s.c; ++c) z += (out[base + c * pl] = std::exp(xp[base + c * pl] - m));
      for (int c = 0; c < s.c; ++c) out[base + c * pl] /= z;
    }
  auto xh = x.handle();
  return make_result<T>(s, std::move(out), {&x}, [xh, s, pl](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t j = 0; j < pl; ++j) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * pl + j;
        T dot = 0;
        for (int c = 0; c < s.c; ++c) dot += g[base + c * pl] * y[base + c * pl];
        for (int c = 0; c < s.c; ++c)
          dx[base + c * pl] += y[base + c * pl] * (g[base + c * pl] - dot);
      }
  });
}

// Non-overlapping r x r average pooling in ceil mode; partial windows at the
// border average only the elements they cover.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int r) {
  if (r < 1) detail::raise<InvalidArgument>("avg_pool", "window must be >= 1");
  const Shape s = x.shape();
  const int ho = (s.h + r - 1) / r;
  const int wo = (s.w + r - 1) / r;
  const Shape os{s.n, s.c, ho, wo};
  std::vector<T> out(os.numel());
  const T* xp = x.ptr();
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const int y1 = std::min(s.h, (oy + 1) * r);
        const int x1 = std::min(s.w, (ox + 1) * r);
        T acc = 0;
        for (int y = oy * r; y < y1; ++y)
          for (int xx = ox * r; xx < x1; ++xx) acc += xp[(nc * s.h + y) * s.w + xx];
        out[(nc * ho + oy) * wo + ox] = acc / static_cast<T>((y1 - oy * r) * (x1 - ox * r));
      }
  auto xh = x.handle();
  return make_result<T>(os, std::move(out), {&x}, [xh, s, r, ho, wo](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    for (int nc = 0; nc < s.n * s.c; ++nc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const int y1 = std::min(s.h, (oy + 1) * r);
          const int x1 = std::min(s.w, (ox + 1) * r);
          const T g = self.grad[(nc * ho + oy) * wo + ox] /
                      static_cast<T>((y1 - oy * r) * (x1 - ox * r));
          for (int y = oy * r; y < y1; ++y)
            for (int xx = ox * r; xx < x1; ++xx) dx[(nc * s.h + y) * s.w + xx] += g;
        }
  });
}

namespace detail {

// Half-pixel-centre source coordinate, clamped to the valid range.
struct LerpTap {
  int i0;
  int i1;
  double frac;
};

inline std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

// Bilinear resize to exactly (out_h, out_w), half-pixel centres.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) detail::raise<InvalidArgument>("upsample_bilinear", "bad size");
  const Shape s = x.shape();
  const auto ty = detail::lerp_taps(s.h, out_h);
  const auto tx = detail::lerp_taps(s.w, out_w);
  const Shape os{s.n, s.c, out_h, out_w};
  std::vector<T> out(os.numel());
  const T* xp = x.ptr();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = xp + static_cast<std::size_t>(nc) * s.plane();
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty[oy].frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx[ox].frac);
        const T top = src[ty[oy].i0 * s.w + tx[ox].i0] * (1 - fx) + src[ty[oy].i0 * s.w + tx[ox].i1] * fx;
        const T bot = src[ty[oy].i1 * s.w + tx[ox].i0] * (1 - fx) + src[ty[oy].i1 * s.w + tx[ox].i1] * fx;
        out[(static_cast<std::size_t>(nc) * out_h + oy) * out_w + ox] = top * (1 - fy) + bot * fy;
      }
    }
  }
  auto xh = x.handle();
  return make_result<T>(os, std::move(out), {&x}, [xh, s, ty, tx, out_h, out_w](Node<T>& self) {
    T* dx = grad_target(xh);
    if (!dx) return;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      T* dst = dx + static_cast<std::size_t>(nc) * s.plane();
      for (int oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty[oy].frac);
        for (int ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx[ox].frac);
          const T g = self.grad[(static_cast<std::size_t>(nc) * out_h + oy) * out_w + ox];
          dst[ty[oy].i0 * s.w + tx[ox].i0] += g * (1 - fy) * (1 - fx);
          dst[ty[oy].i0 * s.w + tx[ox].i1] += g * (1 - fy) * fx;
          dst[ty[oy].i1 * s.w + tx[ox].i0] += g * fy * (1 - fx);
          dst[ty[oy].i1 * s.w + tx[ox].i1] += g * fy * fx;
        }
      }
    }
  });
}

}  // namespace dyolo
