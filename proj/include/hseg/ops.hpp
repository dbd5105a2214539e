#pragma once

#include <cstdint>
#include <vector>

#include "hseg/tensor.hpp"

namespace hseg {

enum class Padding { Same, Valid };
enum class Mode { Train, Eval };

// Elementwise / reduction ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real_t c);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Adds a per-channel bias to an NCHW tensor; bias has shape (C).
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// 2-d cross-correlation over NCHW input with an (outC, inC, kh, kw) kernel.
// "Same" padding keeps ceil(extent / stride); "Valid" drops border positions.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1, int dilation = 1,
              Padding padding = Padding::Same);

// Adjoint of valid-padding conv2d with the same (outC, inC, kh, kw) kernel:
// input has outC channels, output has inC channels and extents
// (h-1)*stride + kh by (w-1)*stride + kw.
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, int stride);

// Bilinear interpolation to (target_h, target_w), align-corners-false
// convention. Targets must not be smaller than the input extents.
Tensor bilinear_upsample(const Tensor& input, int target_h, int target_w);

// Batch normalization over (N, H, W) per channel followed by an optional
// ReLU. Train mode normalizes with batch statistics and folds them into the
// running stats with the given EMA decay; eval mode uses the running stats.
Tensor batch_norm_relu(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       Tensor& running_mean, Tensor& running_var, Mode mode,
                       real_t ema_decay = 0.9, bool apply_relu = true);

// Per-pixel softmax over the channel axis of an NCHW tensor, computed with
// max subtraction.
Tensor softmax_map(const Tensor& logits);

// One supervised pixel: `pixel` is a linear index over N*H*W of the sigma
// map, `target` the channel holding its ground-truth class.
struct PixelTarget {
  int32_t pixel;
  int32_t target;
};

// Mean negative log-probability of the targets over the listed pixels.
// An empty list yields a constant 0. Probabilities are clamped at 1e-12
// before the log.
Tensor nll_mean(const Tensor& sigma, const std::vector<PixelTarget>& pixels);

// Per-pixel argmax over channels (ties break toward the lowest index).
// Not differentiable; returns one decision per N*H*W pixel.
std::vector<int> channel_argmax(const Tensor& sigma);

constexpr real_t kBatchNormEps = real_t(1e-5);
constexpr real_t kLogEps = real_t(1e-12);

}  // namespace hseg
