#include "dtsst/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtsst/errors.hpp"

namespace dtsst {

namespace {

std::size_t norm_axis(int axis, std::size_t nd) {
  const int n = static_cast<int>(nd);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.dim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Rows x last-axis decomposition used by the last-axis reductions.
struct RowView {
  std::size_t rows;
  std::size_t width;
};

RowView rows_of(const Tensor& t) {
  if (t.dim() == 0 || t.size(-1) == 0) throw ShapeError("empty last axis");
  const std::size_t width = t.size(-1);
  return {t.numel() / width, width};
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s) {
  if (s == 0) throw ShapeError("stride must be positive");
  if (k == 0 || k > in) {
    throw ShapeError("window " + std::to_string(k) + " does not fit extent " + std::to_string(in));
  }
  return (in - k) / s + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Stride2 stride,
              std::size_t groups) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t n_batch = input.size(0), cin = input.size(1), h = input.size(2),
                    w = input.size(3);
  const std::size_t cout = kernel.size(0), cpg_in = kernel.size(1), kh = kernel.size(2),
                    kw = kernel.size(3);
  if (groups == 0 || cin % groups != 0) {
    throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                     " not divisible by groups " + std::to_string(groups));
  }
  if (cin / groups != cpg_in || cout % groups != 0) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                     shape_str(input.shape()) + " and groups " + std::to_string(groups));
  }
  if (kh > h || kw > w) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than input " +
                     shape_str(input.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t ho = conv_out_extent(h, kh, stride.h);
  const std::size_t wo = conv_out_extent(w, kw, stride.w);
  const std::size_t cpg_out = cout / groups;
  const std::size_t sh = stride.h, sw = stride.w;

  std::vector<double> out(n_batch * cout * ho * wo, 0.0);
  const double* x = input.data().data();
  const double* k = kernel.data().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* oplane = out.data() + (n * cout + co) * ho * wo;
      if (bias.defined()) std::fill(oplane, oplane + ho * wo, bias.data()[co]);
      const std::size_t g = co / cpg_out;
      for (std::size_t ci = 0; ci < cpg_in; ++ci) {
        const double* xplane = x + (n * cin + g * cpg_in + ci) * h * w;
        const double* kplane = k + (co * cpg_in + ci) * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const double* xrow = xplane + (oh * sh + i) * w;
            double* orow = oplane + oh * wo;
            for (std::size_t j = 0; j < kw; ++j) {
              const double kv = kplane[i * kw + j];
              const double* xr = xrow + j;
              for (std::size_t ow = 0; ow < wo; ++ow) orow[ow] += kv * xr[ow * sw];
            }
          }
        }
      }
    }
  }

  return make_op_result(
      Shape{n_batch, cout, ho, wo}, std::move(out), {input, kernel, bias},
      [=](std::span<const double> gout) mutable {
        const double* go = gout.data();
        const double* xv = input.data().data();
        const double* kv = kernel.data().data();
        double* gx = input.requires_grad() ? input.mutable_grad().data() : nullptr;
        double* gk = kernel.requires_grad() ? kernel.mutable_grad().data() : nullptr;
        double* gb = bias.defined() && bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t co = 0; co < cout; ++co) {
            const double* gplane = go + (n * cout + co) * ho * wo;
            if (gb) {
              double s = 0.0;
              for (std::size_t q = 0; q < ho * wo; ++q) s += gplane[q];
              gb[co] += s;
            }
            const std::size_t g = co / cpg_out;
            for (std::size_t ci = 0; ci < cpg_in; ++ci) {
              const std::size_t plane = (n * cin + g * cpg_in + ci) * h * w;
              const std::size_t kbase = (co * cpg_in + ci) * kh * kw;
              for (std::size_t i = 0; i < kh; ++i) {
                for (std::size_t oh = 0; oh < ho; ++oh) {
                  const std::size_t xrow = plane + (oh * sh + i) * w;
                  const double* grow = gplane + oh * wo;
                  for (std::size_t j = 0; j < kw; ++j) {
                    if (gk) {
                      double s = 0.0;
                      const double* xr = xv + xrow + j;
                      for (std::size_t ow = 0; ow < wo; ++ow) s += grow[ow] * xr[ow * sw];
                      gk[kbase + i * kw + j] += s;
                    }
                    if (gx) {
                      const double kval = kv[kbase + i * kw + j];
                      double* gxr = gx + xrow + j;
                      for (std::size_t ow = 0; ow < wo; ++ow) gxr[ow * sw] += kval * grow[ow];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Tensor avg_pool2d(const Tensor& input, Window2 window, Stride2 stride) {
  require_rank(input, 4, "avg_pool2d");
  const std::size_t nc = input.size(0) * input.size(1), h = input.size(2), w = input.size(3);
  const std::size_t ho = conv_out_extent(h, window.h, stride.h);
  const std::size_t wo = conv_out_extent(w, window.w, stride.w);
  const double inv = 1.0 / static_cast<double>(window.h * window.w);

  std::vector<double> out(nc * ho * wo, 0.0);
  const double* x = input.data().data();
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        double s = 0.0;
        for (std::size_t i = 0; i < window.h; ++i) {
          const double* row = x + p * h * w + (oh * stride.h + i) * w + ow * stride.w;
          for (std::size_t j = 0; j < window.w; ++j) s += row[j];
        }
        out[(p * ho + oh) * wo + ow] = s * inv;
      }
    }
  }
  return make_op_result(
      Shape{input.size(0), input.size(1), ho, wo}, std::move(out), {input},
      [=](std::span<const double> gout) mutable {
        double* gx = input.mutable_grad().data();
        for (std::size_t p = 0; p < nc; ++p) {
          for (std::size_t oh = 0; oh < ho; ++oh) {
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const double g = gout[(p * ho + oh) * wo + ow] * inv;
              for (std::size_t i = 0; i < window.h; ++i) {
                double* row = gx + p * h * w + (oh * stride.h + i) * w + ow * stride.w;
                for (std::size_t j = 0; j < window.w; ++j) row[j] += g;
              }
            }
          }
        }
      });
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                  double eps) {
  require_rank(input, 4, "batch_norm");
  const std::size_t n_batch = input.size(0), c = input.size(1),
                    hw = input.size(2) * input.size(3);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean), static_cast<const Tensor*>(&running_var)}) {
    if (t->numel() != c) throw ShapeError("batch_norm: per-channel tensor size mismatch");
  }
  const std::size_t m = n_batch * hw;
  if (m == 0) throw ShapeError("batch_norm: empty input");
  const double* x = input.data().data();

  std::vector<double> invstd(c);
  std::vector<double> mean(c);
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const double* p = x + (n * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) s += p[q];
      }
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const double* p = x + (n * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) ss += (p[q] - mu) * (p[q] - mu);
      }
      const double var = ss / static_cast<double>(m);
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mu;
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.data()[ch];
      invstd[ch] = 1.0 / std::sqrt(running_var.data()[ch] + eps);
    }
  }

  std::vector<double> xhat(input.numel());
  std::vector<double> out(input.numel());
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (n * c + ch) * hw;
      const double gm = gamma.data()[ch], bt = beta.data()[ch];
      for (std::size_t q = 0; q < hw; ++q) {
        const double xh = (x[base + q] - mean[ch]) * invstd[ch];
        xhat[base + q] = xh;
        out[base + q] = gm * xh + bt;
      }
    }
  }

  return make_op_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const double> gout) mutable {
        double* gx = input.requires_grad() ? input.mutable_grad().data() : nullptr;
        double* gg = gamma.requires_grad() ? gamma.mutable_grad().data() : nullptr;
        double* gbt = beta.requires_grad() ? beta.mutable_grad().data() : nullptr;
        const double md = static_cast<double>(m);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < n_batch; ++n) {
            const std::size_t base = (n * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q) {
              sum_g += gout[base + q];
              sum_gx += gout[base + q] * xhat[base + q];
            }
          }
          if (gg) gg[ch] += sum_gx;
          if (gbt) gbt[ch] += sum_g;
          if (!gx) continue;
          const double gm = gamma.data()[ch];
          for (std::size_t n = 0; n < n_batch; ++n) {
            const std::size_t base = (n * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q) {
              if (training) {
                gx[base + q] += gm * invstd[ch] / md *
                                (md * gout[base + q] - sum_g - xhat[base + q] * sum_gx);
              } else {
                gx[base + q] += gm * invstd[ch] * gout[base + q];
              }
            }
          }
        }
      });
}

Tensor elu(const Tensor& input, double alpha) {
  std::vector<double> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] > 0.0 ? x[i] : alpha * std::expm1(x[i]);
  }
  return make_op_result(input.shape(), std::move(out), {input},
                        [=](std::span<const double> gout) mutable {
                          auto gx = input.mutable_grad();
                          const auto xv = input.data();
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += gout[i] * (xv[i] > 0.0 ? 1.0 : alpha * std::exp(xv[i]));
                          }
                        });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t din = weight.size(0), dout = weight.size(1);
  if (input.dim() == 0 || input.size(-1) != din) {
    throw ShapeError("linear: input " + shape_str(input.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != dout) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t rows = input.numel() / din;
  Shape out_shape = input.shape();
  out_shape.back() = dout;

  std::vector<double> out(rows * dout, 0.0);
  const double* x = input.data().data();
  const double* wv = weight.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = out.data() + r * dout;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), orow);
    for (std::size_t k = 0; k < din; ++k) {
      const double xv = x[r * din + k];
      const double* wrow = wv + k * dout;
      for (std::size_t o = 0; o < dout; ++o) orow[o] += xv * wrow[o];
    }
  }
  return make_op_result(
      std::move(out_shape), std::move(out), {input, weight, bias},
      [=](std::span<const double> gout) mutable {
        const double* xd = input.data().data();
        const double* wd = weight.data().data();
        double* gx = input.requires_grad() ? input.mutable_grad().data() : nullptr;
        double* gw = weight.requires_grad() ? weight.mutable_grad().data() : nullptr;
        double* gb = bias.defined() && bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = gout.data() + r * dout;
          if (gb) {
            for (std::size_t o = 0; o < dout; ++o) gb[o] += grow[o];
          }
          for (std::size_t k = 0; k < din; ++k) {
            const double* wrow = wd + k * dout;
            if (gx) {
              double s = 0.0;
              for (std::size_t o = 0; o < dout; ++o) s += grow[o] * wrow[o];
              gx[r * din + k] += s;
            }
            if (gw) {
              const double xv = xd[r * din + k];
              double* gwrow = gw + k * dout;
              for (std::size_t o = 0; o < dout; ++o) gwrow[o] += xv * grow[o];
            }
          }
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || a.dim() != b.dim()) {
    throw ShapeError("matmul: ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i + 2 < a.dim(); ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw ShapeError("matmul: batch mismatch " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
  }
  const std::size_t m = a.size(-2), kd = a.size(-1), n = b.size(-1);
  if (b.size(-2) != kd) {
    throw ShapeError("matmul: inner mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * kd);
  Shape out_shape = a.shape();
  out_shape.back() = n;

  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const double* A = ad + bt * m * kd;
    const double* B = bd + bt * kd * n;
    double* C = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < kd; ++k) {
        const double av = A[i * kd + k];
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[k * n + j];
      }
    }
  }
  return make_op_result(
      std::move(out_shape), std::move(out), {a, b}, [=](std::span<const double> gout) mutable {
        const double* Ad = a.data().data();
        const double* Bd = b.data().data();
        double* ga = a.requires_grad() ? a.mutable_grad().data() : nullptr;
        double* gb = b.requires_grad() ? b.mutable_grad().data() : nullptr;
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const double* A = Ad + bt * m * kd;
          const double* B = Bd + bt * kd * n;
          const double* G = gout.data() + bt * m * n;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t k = 0; k < kd; ++k) {
              if (ga) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[k * n + j];
                ga[bt * m * kd + i * kd + k] += s;
              }
              if (gb) {
                const double av = A[i * kd + k];
                double* gbr = gb + bt * kd * n + k * n;
                for (std::size_t j = 0; j < n; ++j) gbr[j] += av * G[i * n + j];
              }
            }
          }
        }
      });
}

Tensor softmax(const Tensor& input) {
  const auto [rows, width] = rows_of(input);
  std::vector<double> out(input.numel());
  const double* x = input.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    double* yr = out.data() + r * width;
    const double mx = *std::max_element(xr, xr + width);
    double s = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < width; ++j) yr[j] /= s;
  }
  std::vector<double> saved = out;
  return make_op_result(input.shape(), std::move(out), {input},
                        [=, y = std::move(saved)](std::span<const double> gout) mutable {
                          auto gx = input.mutable_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* yr = y.data() + r * width;
                            const double* gr = gout.data() + r * width;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
                            for (std::size_t j = 0; j < width; ++j) {
                              gx[r * width + j] += yr[j] * (gr[j] - dot);
                            }
                          }
                        });
}

Tensor log_softmax(const Tensor& input) {
  const auto [rows, width] = rows_of(input);
  std::vector<double> out(input.numel());
  std::vector<double> probs(input.numel());
  const double* x = input.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    const double mx = *std::max_element(xr, xr + width);
    double s = 0.0;
    for (std::size_t j = 0; j < width; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < width; ++j) {
      out[r * width + j] = xr[j] - lse;
      probs[r * width + j] = std::exp(xr[j] - lse);
    }
  }
  return make_op_result(input.shape(), std::move(out), {input},
                        [=, p = std::move(probs)](std::span<const double> gout) mutable {
                          auto gx = input.mutable_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* gr = gout.data() + r * width;
                            double s = 0.0;
                            for (std::size_t j = 0; j < width; ++j) s += gr[j];
                            for (std::size_t j = 0; j < width; ++j) {
                              gx[r * width + j] += gr[j] - p[r * width + j] * s;
                            }
                          }
                        });
}

Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto [rows, width] = rows_of(input);
  if (gamma.numel() != width || beta.numel() != width) {
    throw ShapeError("layer_norm: scale/shift size mismatch with " + shape_str(input.shape()));
  }
  std::vector<double> out(input.numel());
  std::vector<double> xhat(input.numel());
  std::vector<double> invstd(rows);
  const double* x = input.data().data();
  const double wd = static_cast<double>(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += xr[j];
    mu /= wd;
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= wd;
    invstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const double xh = (xr[j] - mu) * invstd[r];
      xhat[r * width + j] = xh;
      out[r * width + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  return make_op_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const double> gout) mutable {
        double* gx = input.requires_grad() ? input.mutable_grad().data() : nullptr;
        double* gg = gamma.requires_grad() ? gamma.mutable_grad().data() : nullptr;
        double* gb = beta.requires_grad() ? beta.mutable_grad().data() : nullptr;
        const double* gm = gamma.data().data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = gout.data() + r * width;
          const double* xh = xhat.data() + r * width;
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double d = gr[j] * gm[j];
            sum_d += d;
            sum_dx += d * xh[j];
            if (gg) gg[j] += gr[j] * xh[j];
            if (gb) gb[j] += gr[j];
          }
          if (!gx) continue;
          for (std::size_t j = 0; j < width; ++j) {
            const double d = gr[j] * gm[j];
            gx[r * width + j] += invstd[r] / wd * (wd * d - sum_d - xh[j] * sum_dx);
          }
        }
      });
}

Tensor mean_axis(const Tensor& input, int axis) {
  const std::size_t a = norm_axis(axis, input.dim());
  const Shape& s = input.shape();
  const std::size_t extent = s[a];
  if (extent == 0) throw ShapeError("mean over an empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= s[i];
  for (std::size_t i = a + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != a) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const double inv = 1.0 / static_cast<double>(extent);
  std::vector<double> out(outer * inner, 0.0);
  const double* x = input.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* row = x + (o * extent + e) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += row[i];
    }
  }
  for (auto& v : out) v *= inv;
  return make_op_result(std::move(out_shape), std::move(out), {input},
                        [=](std::span<const double> gout) mutable {
                          double* gx = input.mutable_grad().data();
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t e = 0; e < extent; ++e) {
                              double* row = gx + (o * extent + e) * inner;
                              for (std::size_t i = 0; i < inner; ++i) {
                                row[i] += gout[o * inner + i] * inv;
                              }
                            }
                          }
                        });
}

Tensor gap(const Tensor& input) {
  if (input.dim() < 2) throw ShapeError("gap expects [..., L, D], got " + shape_str(input.shape()));
  return mean_axis(input, -2);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    throw ShapeError("add: " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  }
  const std::size_t nb = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % nb];
  return make_op_result(sa, std::move(out), {a, b}, [=](std::span<const double> gout) mutable {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < gout.size(); ++i) gb[i % nb] += gout[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [=](std::span<const double> gout) mutable {
                          if (a.requires_grad()) {
                            auto ga = a.mutable_grad();
                            for (std::size_t i = 0; i < ga.size(); ++i) {
                              ga[i] += gout[i] * b.data()[i];
                            }
                          }
                          if (b.requires_grad()) {
                            auto gb = b.mutable_grad();
                            for (std::size_t i = 0; i < gb.size(); ++i) {
                              gb[i] += gout[i] * a.data()[i];
                            }
                          }
                        });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_op_result(a.shape(), std::move(out), {a},
                        [=](std::span<const double> gout) mutable {
                          auto ga = a.mutable_grad();
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * factor;
                        });
}

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return make_op_result(Shape{1}, {s}, {a}, [=](std::span<const double> gout) mutable {
    auto ga = a.mutable_grad();
    for (auto& g : ga) g += gout[0];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op_result(std::move(shape), std::move(out), {a},
                        [=](std::span<const double> gout) mutable {
                          auto ga = a.mutable_grad();
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
                        });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t nd = a.dim();
  if (order.size() != nd) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(nd, false);
  for (auto o : order) {
    if (o >= nd || seen[o]) throw ShapeError("permute: invalid axis order");
    seen[o] = true;
  }
  const Shape& s = a.shape();
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(nd);
  std::vector<std::size_t> step(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    out_shape[i] = s[order[i]];
    step[i] = in_stride[order[i]];
  }

  // Source offset for every destination element, walked as an odometer.
  const std::size_t total = a.numel();
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    src[flat] = off;
    for (std::size_t ax = nd; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        off += step[ax];
        break;
      }
      off -= step[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = a.data()[src[i]];
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [=, src = std::move(src)](std::span<const double> gout) mutable {
                          auto ga = a.mutable_grad();
                          for (std::size_t i = 0; i < gout.size(); ++i) ga[src[i]] += gout[i];
                        });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t a = norm_axis(axis, parts.front().dim());
  Shape out_shape = parts.front().shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    if (p.dim() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < p.dim(); ++i) {
      if (i != a && p.shape()[i] != out_shape[i]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible along axis " +
                         std::to_string(i));
      }
    }
    out_shape[a] += p.shape()[a];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= out_shape[i];
  for (std::size_t i = a + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t out_extent = out_shape[a];

  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t ext = p.shape()[a];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * ext * inner, ext * inner,
                  out.data() + (o * out_extent + offset) * inner);
    }
    offset += ext;
  }
  return make_op_result(std::move(out_shape), std::move(out), parts,
                        [=, parts = parts](std::span<const double> gout) mutable {
                          std::size_t off = 0;
                          for (auto& p : parts) {
                            const std::size_t ext = p.shape()[a];
                            if (p.requires_grad()) {
                              auto gp = p.mutable_grad();
                              for (std::size_t o = 0; o < outer; ++o) {
                                const double* src =
                                    gout.data() + (o * out_extent + off) * inner;
                                double* dst = gp.data() + o * ext * inner;
                                for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                              }
                            }
                            off += ext;
                          }
                        });
}

Tensor dropout(const Tensor& input, double p, bool training, std::mt19937_64& rng) {
  if (!training || p <= 0.0) return input;
  if (p >= 1.0) throw DataError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(input.numel());
  for (auto& m : mask) m = keep(rng) ? inv : 0.0;
  std::vector<double> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.data()[i] * mask[i];
  return make_op_result(input.shape(), std::move(out), {input},
                        [=, mask = std::move(mask)](std::span<const double> gout) mutable {
                          auto gx = input.mutable_grad();
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i] * mask[i];
                        });
}

}  // namespace dtsst
