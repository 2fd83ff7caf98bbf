#pragma once

#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "dtsst/tensor.hpp"

namespace dtsst {

struct Stride2 {
  std::size_t h = 1;
  std::size_t w = 1;
};

struct Window2 {
  std::size_t h = 1;
  std::size_t w = 1;
};

// Valid (unpadded) cross-correlation.
//   input  [N, Cin, H, W]
//   kernel [Cout, Cin/groups, kh, kw]
//   bias   [Cout] or undefined
// groups == Cin == Cout gives a depthwise convolution.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {},
              Stride2 stride = {}, std::size_t groups = 1);

// floor((in - k) / s) + 1; throws ShapeError when k > in or s == 0.
std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s);

Tensor avg_pool2d(const Tensor& input, Window2 window, Stride2 stride);

// Per-channel normalization of [N, C, H, W]. In training mode the batch
// statistics over N*H*W are used and the running estimates are blended with
// `momentum`; in eval mode the running estimates are used directly.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum = 0.1, double eps = 1e-5);

Tensor elu(const Tensor& input, double alpha = 1.0);

// Affine map over the last axis: input [..., Din] x weight [Din, Dout] + bias [Dout].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias = {});

// Batched matrix product over matching leading axes: [..., M, K] x [..., K, N].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& input);      // over the last axis
Tensor log_softmax(const Tensor& input);  // over the last axis

// Normalizes over the last axis with learnable per-feature scale and shift.
Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Mean over the sequence axis: [L, D] -> [D], [N, L, D] -> [N, D].
Tensor gap(const Tensor& input);

Tensor mean_axis(const Tensor& input, int axis);

// Elementwise sum; `b` may match a trailing suffix of a's shape, in which case
// it is broadcast over the leading axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// Inverted dropout; identity when p == 0 or when not training.
Tensor dropout(const Tensor& input, double p, bool training, std::mt19937_64& rng);

}  // namespace dtsst
