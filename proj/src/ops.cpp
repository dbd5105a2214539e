#include "hseg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "hseg/util.hpp"

namespace hseg {

using detail::TensorNode;
using EMat = Eigen::Matrix<real_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

bool any_requires_grad(const std::vector<Tensor>& parents) {
  for (const auto& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

Tensor make_op(Shape shape, std::vector<real_t> value, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled() && any_requires_grad(parents)) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a.shape(), b.shape())) {
    throw Error(strprintf("%s: shape mismatch %s vs %s", op, shape_str(a.shape()).c_str(),
                          shape_str(b.shape()).c_str()));
  }
}

void require_4d(const Tensor& t, const char* what) {
  if (t.shape().size() != 4) {
    throw Error(strprintf("%s must be 4-d (NCHW), got %s", what, shape_str(t.shape()).c_str()));
  }
}

struct ConvGeometry {
  int n, ci, h, w;
  int co, kh, kw;
  int stride, dilation;
  int eff_kh, eff_kw;
  int oh, ow;
  int pad_top, pad_left;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int stride, int dilation,
                           Padding padding) {
  require_4d(input, "conv2d input");
  require_4d(kernel, "conv2d kernel");
  if (stride < 1 || dilation < 1) throw Error("conv2d: stride and dilation must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.ci = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.co = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.dilation = dilation;
  if (kernel.dim(1) != g.ci) {
    throw Error(strprintf("conv2d: input channels do not match kernel, input %s vs kernel %s",
                          shape_str(input.shape()).c_str(), shape_str(kernel.shape()).c_str()));
  }
  g.eff_kh = (g.kh - 1) * dilation + 1;
  g.eff_kw = (g.kw - 1) * dilation + 1;
  if (padding == Padding::Same) {
    g.oh = (g.h + stride - 1) / stride;
    g.ow = (g.w + stride - 1) / stride;
    int pad_h = std::max((g.oh - 1) * stride + g.eff_kh - g.h, 0);
    int pad_w = std::max((g.ow - 1) * stride + g.eff_kw - g.w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (g.h < g.eff_kh || g.w < g.eff_kw) {
      throw Error(strprintf("conv2d: valid padding needs input >= effective kernel, input %s vs "
                            "kernel %s (dilation %d)",
                            shape_str(input.shape()).c_str(), shape_str(kernel.shape()).c_str(),
                            dilation));
    }
    g.oh = (g.h - g.eff_kh) / stride + 1;
    g.ow = (g.w - g.eff_kw) / stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

// Gathers one sample into a (ci*kh*kw) x (oh*ow) patch matrix.
void im2col(const real_t* x, const ConvGeometry& g, real_t* cols) {
  const int64_t plane = static_cast<int64_t>(g.h) * g.w;
  int64_t row = 0;
  for (int c = 0; c < g.ci; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx, ++row) {
        real_t* dst = cols + row * g.oh * g.ow;
        const real_t* src = x + c * plane;
        for (int oy = 0; oy < g.oh; ++oy) {
          int iy = oy * g.stride - g.pad_top + ky * g.dilation;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, real_t(0));
            dst += g.ow;
            continue;
          }
          for (int ox = 0; ox < g.ow; ++ox) {
            int ix = ox * g.stride - g.pad_left + kx * g.dilation;
            *dst++ = (ix >= 0 && ix < g.w) ? src[static_cast<int64_t>(iy) * g.w + ix] : real_t(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a patch matrix back into one sample's gradient.
void col2im_add(const real_t* cols, const ConvGeometry& g, real_t* dx) {
  const int64_t plane = static_cast<int64_t>(g.h) * g.w;
  int64_t row = 0;
  for (int c = 0; c < g.ci; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx, ++row) {
        const real_t* src = cols + row * g.oh * g.ow;
        real_t* dst = dx + c * plane;
        for (int oy = 0; oy < g.oh; ++oy) {
          int iy = oy * g.stride - g.pad_top + ky * g.dilation;
          if (iy >= 0 && iy < g.h) {
            for (int ox = 0; ox < g.ow; ++ox) {
              int ix = ox * g.stride - g.pad_left + kx * g.dilation;
              if (ix >= 0 && ix < g.w) dst[static_cast<int64_t>(iy) * g.w + ix] += src[ox];
            }
          }
          src += g.ow;
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<real_t> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<real_t> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<real_t> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& a, real_t c) {
  std::vector<real_t> out(a.values());
  for (auto& v : out) v *= c;
  return make_op(a.shape(), std::move(out), {a}, [c](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += c * n.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<real_t> out(a.values());
  for (auto& v : out) v = std::max(v, real_t(0));
  return make_op(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (p->value[i] > real_t(0)) p->grad[i] += n.grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  real_t s = 0;
  for (real_t v : a.values()) s += v;
  return make_op({1}, {s}, {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    real_t g = n.grad[0];
    for (auto& pg : p->grad) pg += g;
  });
}

Tensor mean(const Tensor& a) {
  real_t s = 0;
  for (real_t v : a.values()) s += v;
  real_t inv = real_t(1) / static_cast<real_t>(a.numel());
  return make_op({1}, {s * inv}, {a}, [inv](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    real_t g = n.grad[0] * inv;
    for (auto& pg : p->grad) pg += g;
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_4d(x, "add_channel_bias input");
  if (bias.shape().size() != 1 || bias.dim(0) != x.dim(1)) {
    throw Error(strprintf("add_channel_bias: bias %s does not match input %s",
                          shape_str(bias.shape()).c_str(), shape_str(x.shape()).c_str()));
  }
  int n = x.dim(0), c = x.dim(1);
  int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  std::vector<real_t> out(x.values());
  const auto& bv = bias.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      real_t b = bv[static_cast<size_t>(j)];
      real_t* dst = out.data() + (static_cast<int64_t>(i) * c + j) * plane;
      for (int64_t k = 0; k < plane; ++k) dst[k] += b;
    }
  return make_op(x.shape(), std::move(out), {x, bias}, [n, c, plane](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pb = nd.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      for (size_t i = 0; i < nd.grad.size(); ++i) px->grad[i] += nd.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const real_t* src = nd.grad.data() + (static_cast<int64_t>(i) * c + j) * plane;
          real_t s = 0;
          for (int64_t k = 0; k < plane; ++k) s += src[k];
          pb->grad[static_cast<size_t>(j)] += s;
        }
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int dilation,
              Padding padding) {
  ConvGeometry g = conv_geometry(input, kernel, stride, dilation, padding);
  const int64_t in_plane = static_cast<int64_t>(g.ci) * g.h * g.w;
  const int64_t out_plane = static_cast<int64_t>(g.co) * g.oh * g.ow;
  const int64_t krows = static_cast<int64_t>(g.ci) * g.kh * g.kw;
  const int64_t ocols = static_cast<int64_t>(g.oh) * g.ow;

  std::vector<real_t> out(static_cast<size_t>(g.n) * out_plane);
  std::vector<real_t> cols(static_cast<size_t>(krows) * ocols);
  Eigen::Map<const EMat> wmat(kernel.values().data(), g.co, krows);
  for (int i = 0; i < g.n; ++i) {
    im2col(input.values().data() + i * in_plane, g, cols.data());
    Eigen::Map<const EMat> cmat(cols.data(), krows, ocols);
    Eigen::Map<EMat> omat(out.data() + i * out_plane, g.co, ocols);
    omat.noalias() = wmat * cmat;
  }

  return make_op({g.n, g.co, g.oh, g.ow}, std::move(out), {input, kernel}, [g](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pw = nd.parents[1];
    const int64_t in_plane = static_cast<int64_t>(g.ci) * g.h * g.w;
    const int64_t out_plane = static_cast<int64_t>(g.co) * g.oh * g.ow;
    const int64_t krows = static_cast<int64_t>(g.ci) * g.kh * g.kw;
    const int64_t ocols = static_cast<int64_t>(g.oh) * g.ow;
    std::vector<real_t> cols(static_cast<size_t>(krows) * ocols);
    std::vector<real_t> dcols(static_cast<size_t>(krows) * ocols);
    Eigen::Map<const EMat> wmat(pw->value.data(), g.co, krows);
    if (px->requires_grad) px->ensure_grad();
    if (pw->requires_grad) pw->ensure_grad();
    for (int i = 0; i < g.n; ++i) {
      Eigen::Map<const EMat> gmat(nd.grad.data() + i * out_plane, g.co, ocols);
      if (pw->requires_grad) {
        im2col(px->value.data() + i * in_plane, g, cols.data());
        Eigen::Map<const EMat> cmat(cols.data(), krows, ocols);
        Eigen::Map<EMat> dwmat(pw->grad.data(), g.co, krows);
        dwmat.noalias() += gmat * cmat.transpose();
      }
      if (px->requires_grad) {
        Eigen::Map<EMat> dcmat(dcols.data(), krows, ocols);
        dcmat.noalias() = wmat.transpose() * gmat;
        col2im_add(dcols.data(), g, px->grad.data() + i * in_plane);
      }
    }
  });
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, int stride) {
  require_4d(input, "conv2d_transpose input");
  require_4d(kernel, "conv2d_transpose kernel");
  if (stride < 1) throw Error("conv2d_transpose: stride must be positive");
  const int n = input.dim(0), ca = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int kh = kernel.dim(2), kw = kernel.dim(3);
  const int cb = kernel.dim(1);
  if (kernel.dim(0) != ca) {
    throw Error(strprintf("conv2d_transpose: input channels do not match kernel, input %s vs "
                          "kernel %s",
                          shape_str(input.shape()).c_str(), shape_str(kernel.shape()).c_str()));
  }
  const int oh = (h - 1) * stride + kh;
  const int ow = (w - 1) * stride + kw;
  std::vector<real_t> out(static_cast<size_t>(n) * cb * oh * ow, real_t(0));
  const auto& xv = input.values();
  const auto& kv = kernel.values();
  auto xat = [&](int i, int c, int y, int x) -> real_t {
    return xv[((static_cast<int64_t>(i) * ca + c) * h + y) * w + x];
  };
  auto kat = [&](int a, int b, int ky, int kx) -> real_t {
    return kv[((static_cast<int64_t>(a) * cb + b) * kh + ky) * kw + kx];
  };
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < ca; ++a)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          real_t v = xat(i, a, y, x);
          if (v == real_t(0)) continue;
          for (int b = 0; b < cb; ++b) {
            real_t* dst = out.data() + ((static_cast<int64_t>(i) * cb + b) * oh + y * stride) * ow +
                          x * stride;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) dst[static_cast<int64_t>(ky) * ow + kx] += v * kat(a, b, ky, kx);
          }
        }

  return make_op({n, cb, oh, ow}, std::move(out), {input, kernel},
                 [n, ca, cb, h, w, kh, kw, oh, ow, stride](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pk = nd.parents[1];
    auto gat = [&](int i, int b, int y, int x) -> real_t {
      return nd.grad[((static_cast<int64_t>(i) * cb + b) * oh + y) * ow + x];
    };
    if (px->requires_grad) {
      // adjoint: grad of the input is a valid-padding conv2d of the output
      // grad with the same kernel
      px->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < ca; ++a)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              real_t s = 0;
              for (int b = 0; b < cb; ++b)
                for (int ky = 0; ky < kh; ++ky)
                  for (int kx = 0; kx < kw; ++kx)
                    s += gat(i, b, y * stride + ky, x * stride + kx) *
                         pk->value[((static_cast<int64_t>(a) * cb + b) * kh + ky) * kw + kx];
              px->grad[((static_cast<int64_t>(i) * ca + a) * h + y) * w + x] += s;
            }
    }
    if (pk->requires_grad) {
      pk->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < ca; ++a)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              real_t v = px->value[((static_cast<int64_t>(i) * ca + a) * h + y) * w + x];
              if (v == real_t(0)) continue;
              for (int b = 0; b < cb; ++b)
                for (int ky = 0; ky < kh; ++ky)
                  for (int kx = 0; kx < kw; ++kx)
                    pk->grad[((static_cast<int64_t>(a) * cb + b) * kh + ky) * kw + kx] +=
                        v * gat(i, b, y * stride + ky, x * stride + kx);
            }
    }
  });
}

namespace {

struct AxisInterp {
  std::vector<int> lo, hi;
  std::vector<real_t> t;  // weight of hi
};

AxisInterp interp_axis(int in, int out) {
  AxisInterp a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.t.resize(out);
  double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    int hi = std::min(lo + 1, in - 1);
    a.lo[i] = lo;
    a.hi[i] = hi;
    a.t[i] = static_cast<real_t>(src - lo);
  }
  return a;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& input, int target_h, int target_w) {
  require_4d(input, "bilinear_upsample input");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (target_h < h || target_w < w) {
    throw Error(strprintf("bilinear_upsample: target %dx%d smaller than input %dx%d", target_h,
                          target_w, h, w));
  }
  if (target_h == h && target_w == w) return input;

  AxisInterp ay = interp_axis(h, target_h);
  AxisInterp ax = interp_axis(w, target_w);
  std::vector<real_t> out(static_cast<size_t>(n) * c * target_h * target_w);
  const auto& xv = input.values();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const real_t* src = xv.data() + (static_cast<int64_t>(i) * c + ch) * h * w;
      real_t* dst = out.data() + (static_cast<int64_t>(i) * c + ch) * target_h * target_w;
      for (int y = 0; y < target_h; ++y) {
        const real_t* r0 = src + static_cast<int64_t>(ay.lo[y]) * w;
        const real_t* r1 = src + static_cast<int64_t>(ay.hi[y]) * w;
        real_t ty = ay.t[y];
        for (int x = 0; x < target_w; ++x) {
          real_t tx = ax.t[x];
          real_t top = r0[ax.lo[x]] * (1 - tx) + r0[ax.hi[x]] * tx;
          real_t bot = r1[ax.lo[x]] * (1 - tx) + r1[ax.hi[x]] * tx;
          *dst++ = top * (1 - ty) + bot * ty;
        }
      }
    }

  return make_op({n, c, target_h, target_w}, std::move(out), {input},
                 [n, c, h, w, target_h, target_w, ay, ax](TensorNode& nd) {
    auto& p = nd.parents[0];
    p->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        real_t* dst = p->grad.data() + (static_cast<int64_t>(i) * c + ch) * h * w;
        const real_t* g = nd.grad.data() + (static_cast<int64_t>(i) * c + ch) * target_h * target_w;
        for (int y = 0; y < target_h; ++y) {
          real_t ty = ay.t[y];
          for (int x = 0; x < target_w; ++x) {
            real_t tx = ax.t[x];
            real_t gv = *g++;
            dst[static_cast<int64_t>(ay.lo[y]) * w + ax.lo[x]] += gv * (1 - ty) * (1 - tx);
            dst[static_cast<int64_t>(ay.lo[y]) * w + ax.hi[x]] += gv * (1 - ty) * tx;
            dst[static_cast<int64_t>(ay.hi[y]) * w + ax.lo[x]] += gv * ty * (1 - tx);
            dst[static_cast<int64_t>(ay.hi[y]) * w + ax.hi[x]] += gv * ty * tx;
          }
        }
      }
  });
}

Tensor batch_norm_relu(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       Tensor& running_mean, Tensor& running_var, Mode mode, real_t ema_decay,
                       bool apply_relu) {
  require_4d(x, "batch_norm input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto check_c = [&](const Tensor& t, const char* what) {
    if (t.shape().size() != 1 || t.dim(0) != c) {
      throw Error(strprintf("batch_norm: %s must have one entry per channel (%d), got %s", what, c,
                            shape_str(t.shape()).c_str()));
    }
  };
  check_c(gamma, "gamma");
  check_c(beta, "beta");
  check_c(running_mean, "running mean");
  check_c(running_var, "running variance");
  if (!(ema_decay > real_t(0) && ema_decay < real_t(1))) {
    throw Error("batch_norm: ema decay must lie in (0,1)");
  }

  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t per_channel = static_cast<int64_t>(n) * plane;
  const auto& xv = x.values();
  std::vector<real_t> mean_c(static_cast<size_t>(c)), inv_c(static_cast<size_t>(c));

  if (mode == Mode::Train) {
    for (int ch = 0; ch < c; ++ch) {
      real_t m = 0;
      for (int i = 0; i < n; ++i) {
        const real_t* src = xv.data() + (static_cast<int64_t>(i) * c + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) m += src[k];
      }
      m /= static_cast<real_t>(per_channel);
      real_t v = 0;
      for (int i = 0; i < n; ++i) {
        const real_t* src = xv.data() + (static_cast<int64_t>(i) * c + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) {
          real_t d = src[k] - m;
          v += d * d;
        }
      }
      v /= static_cast<real_t>(per_channel);
      mean_c[static_cast<size_t>(ch)] = m;
      inv_c[static_cast<size_t>(ch)] = real_t(1) / std::sqrt(v + kBatchNormEps);
      running_mean.values()[static_cast<size_t>(ch)] =
          ema_decay * running_mean.values()[static_cast<size_t>(ch)] + (1 - ema_decay) * m;
      running_var.values()[static_cast<size_t>(ch)] =
          ema_decay * running_var.values()[static_cast<size_t>(ch)] + (1 - ema_decay) * v;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean_c[static_cast<size_t>(ch)] = running_mean.values()[static_cast<size_t>(ch)];
      inv_c[static_cast<size_t>(ch)] =
          real_t(1) / std::sqrt(running_var.values()[static_cast<size_t>(ch)] + kBatchNormEps);
    }
  }

  std::vector<real_t> xhat(xv.size());
  std::vector<real_t> out(xv.size());
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const real_t* src = xv.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      real_t* xh = xhat.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      real_t* dst = out.data() + (static_cast<int64_t>(i) * c + ch) * plane;
      real_t m = mean_c[static_cast<size_t>(ch)], inv = inv_c[static_cast<size_t>(ch)];
      real_t g = gv[static_cast<size_t>(ch)], b = bv[static_cast<size_t>(ch)];
      for (int64_t k = 0; k < plane; ++k) {
        real_t xn = (src[k] - m) * inv;
        xh[k] = xn;
        real_t pre = g * xn + b;
        dst[k] = apply_relu ? std::max(pre, real_t(0)) : pre;
      }
    }

  bool train = mode == Mode::Train;
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [n, c, plane, per_channel, xhat = std::move(xhat), inv_c = std::move(inv_c), train,
                  apply_relu](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pg = nd.parents[1];
    auto& pb = nd.parents[2];
    // dpre: grad through the optional ReLU (output > 0 <=> pre > 0)
    std::vector<real_t> dpre(nd.grad.size());
    for (size_t i = 0; i < dpre.size(); ++i) {
      dpre[i] = (!apply_relu || nd.value[i] > real_t(0)) ? nd.grad[i] : real_t(0);
    }
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    if (px->requires_grad) px->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      real_t sum_dpre = 0, sum_dpre_xh = 0;
      for (int i = 0; i < n; ++i) {
        const int64_t base = (static_cast<int64_t>(i) * c + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) {
          sum_dpre += dpre[static_cast<size_t>(base + k)];
          sum_dpre_xh += dpre[static_cast<size_t>(base + k)] * xhat[static_cast<size_t>(base + k)];
        }
      }
      if (pg->requires_grad) pg->grad[static_cast<size_t>(ch)] += sum_dpre_xh;
      if (pb->requires_grad) pb->grad[static_cast<size_t>(ch)] += sum_dpre;
      if (px->requires_grad) {
        real_t g = pg->value[static_cast<size_t>(ch)];
        real_t inv = inv_c[static_cast<size_t>(ch)];
        real_t mean_dxh = g * sum_dpre / static_cast<real_t>(per_channel);
        real_t mean_dxh_xh = g * sum_dpre_xh / static_cast<real_t>(per_channel);
        for (int i = 0; i < n; ++i) {
          const int64_t base = (static_cast<int64_t>(i) * c + ch) * plane;
          for (int64_t k = 0; k < plane; ++k) {
            size_t idx = static_cast<size_t>(base + k);
            real_t dxh = g * dpre[idx];
            if (train) {
              px->grad[idx] += inv * (dxh - mean_dxh - xhat[idx] * mean_dxh_xh);
            } else {
              px->grad[idx] += inv * dxh;
            }
          }
        }
      }
    }
  });
}

Tensor softmax_map(const Tensor& logits) {
  require_4d(logits, "softmax_map input");
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<real_t> out(logits.values().size());
  const auto& xv = logits.values();
  for (int i = 0; i < n; ++i) {
    const int64_t sample = static_cast<int64_t>(i) * c * plane;
    for (int64_t k = 0; k < plane; ++k) {
      real_t mx = xv[static_cast<size_t>(sample + k)];
      for (int ch = 1; ch < c; ++ch) mx = std::max(mx, xv[static_cast<size_t>(sample + ch * plane + k)]);
      real_t denom = 0;
      for (int ch = 0; ch < c; ++ch) {
        real_t e = std::exp(xv[static_cast<size_t>(sample + ch * plane + k)] - mx);
        out[static_cast<size_t>(sample + ch * plane + k)] = e;
        denom += e;
      }
      real_t inv = real_t(1) / denom;
      for (int ch = 0; ch < c; ++ch) out[static_cast<size_t>(sample + ch * plane + k)] *= inv;
    }
  }
  return make_op(logits.shape(), std::move(out), {logits}, [n, c, plane](TensorNode& nd) {
    auto& p = nd.parents[0];
    p->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const int64_t sample = static_cast<int64_t>(i) * c * plane;
      for (int64_t k = 0; k < plane; ++k) {
        real_t dot = 0;
        for (int ch = 0; ch < c; ++ch) {
          size_t idx = static_cast<size_t>(sample + ch * plane + k);
          dot += nd.grad[idx] * nd.value[idx];
        }
        for (int ch = 0; ch < c; ++ch) {
          size_t idx = static_cast<size_t>(sample + ch * plane + k);
          p->grad[idx] += nd.value[idx] * (nd.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor nll_mean(const Tensor& sigma, const std::vector<PixelTarget>& pixels) {
  if (pixels.empty()) return Tensor::scalar(real_t(0));
  require_4d(sigma, "nll_mean input");
  const int n = sigma.dim(0), c = sigma.dim(1), h = sigma.dim(2), w = sigma.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t npix = static_cast<int64_t>(n) * plane;
  const auto& sv = sigma.values();
  real_t acc = 0;
  for (const auto& t : pixels) {
    if (t.pixel < 0 || t.pixel >= npix) throw Error("nll_mean: pixel index out of range");
    if (t.target < 0 || t.target >= c) throw Error("nll_mean: target class out of range");
    int64_t i = t.pixel / plane;
    int64_t k = t.pixel % plane;
    real_t p = sv[static_cast<size_t>((i * c + t.target) * plane + k)];
    acc -= std::log(std::max(p, kLogEps));
  }
  real_t inv = real_t(1) / static_cast<real_t>(pixels.size());
  return make_op({1}, {acc * inv}, {sigma}, [pixels, c, plane, inv](TensorNode& nd) {
    auto& p = nd.parents[0];
    p->ensure_grad();
    real_t g = nd.grad[0] * inv;
    for (const auto& t : pixels) {
      int64_t i = t.pixel / plane;
      int64_t k = t.pixel % plane;
      size_t idx = static_cast<size_t>((i * c + t.target) * plane + k);
      real_t v = p->value[idx];
      if (v >= kLogEps) p->grad[idx] -= g / v;
    }
  });
}

std::vector<int> channel_argmax(const Tensor& sigma) {
  require_4d(sigma, "channel_argmax input");
  const int n = sigma.dim(0), c = sigma.dim(1), h = sigma.dim(2), w = sigma.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<int> out(static_cast<size_t>(n) * plane);
  const auto& sv = sigma.values();
  for (int i = 0; i < n; ++i) {
    const int64_t sample = static_cast<int64_t>(i) * c * plane;
    for (int64_t k = 0; k < plane; ++k) {
      int best = 0;
      real_t bv = sv[static_cast<size_t>(sample + k)];
      for (int ch = 1; ch < c; ++ch) {
        real_t v = sv[static_cast<size_t>(sample + ch * plane + k)];
        if (v > bv) {
          bv = v;
          best = ch;
        }
      }
      out[static_cast<size_t>(i * plane + k)] = best;
    }
  }
  return out;
}

}  // namespace hseg
