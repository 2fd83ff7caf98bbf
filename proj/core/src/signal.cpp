#include "dtsst/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "dtsst/errors.hpp"

namespace dtsst {

namespace signal {

namespace {

constexpr double kPi = std::numbers::pi;

// Mirror index into [0, n) without repeating the edge sample; handles pads
// longer than the signal by folding repeatedly.
std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * (static_cast<long long>(n) - 1);
  long long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

void require_2d(const EegTrial& t, const char* op) {
  if (!t.data.defined() || t.data.dim() != 2) throw ShapeError(std::string(op) + ": expected [ch, T]");
  if (t.fs <= 0.0) throw DataError(std::string(op) + ": sampling rate must be positive");
}

}  // namespace

EegTrial bandpass(const EegTrial& trial, double f_lo, double f_hi) {
  require_2d(trial, "bandpass");
  if (!(f_lo >= 0.0 && f_lo < f_hi && f_hi <= trial.fs / 2.0 + 1e-9)) {
    throw DataError("bandpass: invalid band [" + std::to_string(f_lo) + ", " +
                    std::to_string(f_hi) + "] at fs " + std::to_string(trial.fs));
  }
  const std::size_t ch = trial.channels(), n = trial.samples();
  const double tol = 1e-9;

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> time(n), freq;
  std::vector<double> out(ch * n);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t t = 0; t < n; ++t) time[t] = trial.data.data()[c * n + t];
    fft.fwd(freq, time);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t bin = k <= n / 2 ? k : n - k;
      const double f = static_cast<double>(bin) * trial.fs / static_cast<double>(n);
      if (f < f_lo - tol || f > f_hi + tol) freq[k] = 0.0;
    }
    fft.inv(time, freq);
    for (std::size_t t = 0; t < n; ++t) out[c * n + t] = time[t].real();
  }
  EegTrial result = trial;
  result.data = Tensor::from(trial.data.shape(), std::move(out));
  return result;
}

EegTrial epoch(const EegTrial& recording, double t_start, double t_end) {
  require_2d(recording, "epoch");
  const double duration = static_cast<double>(recording.samples()) / recording.fs;
  if (!(t_start >= 0.0 && t_start < t_end && t_end <= duration + 1e-9)) {
    throw DataError("epoch: window [" + std::to_string(t_start) + ", " + std::to_string(t_end) +
                    ") outside recording of " + std::to_string(duration) + " s");
  }
  const auto first = static_cast<std::size_t>(std::llround(t_start * recording.fs));
  const auto count = static_cast<std::size_t>(std::llround((t_end - t_start) * recording.fs));
  const std::size_t ch = recording.channels(), n = recording.samples();
  if (count == 0 || first + count > n) throw DataError("epoch: window outside recording");
  std::vector<double> out(ch * count);
  for (std::size_t c = 0; c < ch; ++c) {
    std::copy_n(recording.data.data().data() + c * n + first, count, out.data() + c * count);
  }
  EegTrial result = recording;
  result.data = Tensor::from(Shape{ch, count}, std::move(out));
  return result;
}

std::size_t MorletPlan::max_support() const {
  std::size_t m = 0;
  for (const auto& t : taps_re) m = std::max(m, t.size());
  return m;
}

MorletPlan make_morlet_plan(std::vector<double> freqs, double fs) {
  if (fs <= 0.0) throw DataError("morlet plan: sampling rate must be positive");
  if (freqs.empty()) throw DataError("morlet plan: empty frequency grid");
  if (!std::is_sorted(freqs.begin(), freqs.end())) {
    throw DataError("morlet plan: frequencies must be ascending");
  }
  MorletPlan plan;
  plan.fs = fs;
  for (double f : freqs) {
    if (!(f > 0.0)) throw DataError("morlet plan: frequencies must be positive");
    if (f >= fs / 2.0) throw DataError("morlet plan: frequency at or above Nyquist");
    const double cycles = f / 2.0;
    const double sigma = cycles / (2.0 * kPi * f);
    const auto half = static_cast<long long>(std::floor(5.0 * sigma * fs));
    std::vector<double> re, im;
    double energy = 0.0;
    for (long long k = -half; k <= half; ++k) {
      const double t = static_cast<double>(k) / fs;
      const double env = std::exp(-t * t / (2.0 * sigma * sigma));
      re.push_back(env * std::cos(2.0 * kPi * f * t));
      im.push_back(env * std::sin(2.0 * kPi * f * t));
      energy += env * env;
    }
    const double norm = 1.0 / std::sqrt(energy);
    for (auto& v : re) v *= norm;
    for (auto& v : im) v *= norm;
    plan.n_cycles.push_back(cycles);
    plan.sigma_t.push_back(sigma);
    plan.taps_re.push_back(std::move(re));
    plan.taps_im.push_back(std::move(im));
  }
  plan.freqs = std::move(freqs);
  return plan;
}

std::vector<double> frequency_grid(double lo, double hi, double step) {
  if (!(lo > 0.0 && hi >= lo && step > 0.0)) throw DataError("invalid frequency grid");
  std::vector<double> grid;
  for (std::size_t i = 0;; ++i) {
    const double f = lo + static_cast<double>(i) * step;
    if (f > hi + 1e-9) break;
    grid.push_back(f);
  }
  return grid;
}

TfrTrial morlet_tfr(const EegTrial& trial, const MorletPlan& plan) {
  require_2d(trial, "morlet_tfr");
  if (std::abs(plan.fs - trial.fs) > 1e-9) {
    throw DataError("morlet_tfr: plan fs " + std::to_string(plan.fs) + " != trial fs " +
                    std::to_string(trial.fs));
  }
  const std::size_t ch = trial.channels(), n = trial.samples(), nf = plan.n_freqs();
  if (plan.max_support() > 10 * n) {
    throw DataError("morlet_tfr: wavelet support " + std::to_string(plan.max_support()) +
                    " exceeds 10x trial length " + std::to_string(n));
  }
  std::vector<double> out(ch * nf * n);
  const double* x = trial.data.data().data();
  for (std::size_t c = 0; c < ch; ++c) {
    const double* xc = x + c * n;
    for (std::size_t fi = 0; fi < nf; ++fi) {
      const auto& re = plan.taps_re[fi];
      const auto& im = plan.taps_im[fi];
      const auto center = static_cast<long long>((re.size() - 1) / 2);
      double* dst = out.data() + (c * nf + fi) * n;
      for (std::size_t t = 0; t < n; ++t) {
        double acc_re = 0.0, acc_im = 0.0;
        for (std::size_t k = 0; k < re.size(); ++k) {
          const long long m = static_cast<long long>(k) - center;
          const double v = xc[reflect_index(static_cast<long long>(t) - m, n)];
          acc_re += v * re[k];
          acc_im += v * im[k];
        }
        dst[t] = acc_re * acc_re + acc_im * acc_im;
      }
    }
  }
  TfrTrial result;
  result.data = Tensor::from(Shape{ch, nf, n}, std::move(out));
  result.freqs = plan.freqs;
  result.fs = trial.fs;
  result.label = trial.label;
  return result;
}

Tensor zscore(const Tensor& x, std::span<const std::size_t> axes) {
  const Shape& shape = x.shape();
  const std::size_t nd = shape.size();
  std::vector<bool> reduced(nd, false);
  for (auto a : axes) {
    if (a >= nd) throw ShapeError("zscore: axis out of range for " + shape_str(shape));
    reduced[a] = true;
  }
  // Group id of every element = flat index over the kept axes.
  const std::size_t total = x.numel();
  std::vector<std::size_t> group(total);
  std::size_t n_groups = 1;
  for (std::size_t a = 0; a < nd; ++a) {
    if (!reduced[a]) n_groups *= shape[a];
  }
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t g = 0;
    for (std::size_t a = 0; a < nd; ++a) {
      if (!reduced[a]) g = g * shape[a] + idx[a];
    }
    group[flat] = g;
    for (std::size_t a = nd; a-- > 0;) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  std::vector<double> mean(n_groups, 0.0), var(n_groups, 0.0);
  std::vector<std::size_t> count(n_groups, 0);
  const auto v = x.data();
  for (std::size_t i = 0; i < total; ++i) {
    mean[group[i]] += v[i];
    ++count[group[i]];
  }
  for (std::size_t g = 0; g < n_groups; ++g) mean[g] /= static_cast<double>(std::max<std::size_t>(count[g], 1));
  for (std::size_t i = 0; i < total; ++i) {
    const double d = v[i] - mean[group[i]];
    var[group[i]] += d * d;
  }
  std::vector<double> sd(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    sd[g] = std::sqrt(var[g] / static_cast<double>(std::max<std::size_t>(count[g], 1)));
  }
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) {
    const double s = sd[group[i]];
    out[i] = s < 1e-12 ? 0.0 : (v[i] - mean[group[i]]) / s;
  }
  return Tensor::from(shape, std::move(out));
}

Tensor zscore_eeg(const Tensor& eeg) {
  if (eeg.dim() != 2) throw ShapeError("zscore_eeg expects [ch, T]");
  const std::size_t axes[] = {1};
  return zscore(eeg, axes);
}

Tensor zscore_tfr(const Tensor& tfr) {
  if (tfr.dim() != 3) throw ShapeError("zscore_tfr expects [ch, F, T]");
  const std::size_t axes[] = {2};
  return zscore(tfr, axes);
}

void prepare_views(TrialSet& set, const MorletPlan& plan) {
  if (!set.has_tfr()) {
    set.tfr.reserve(set.eeg.size());
    for (const auto& trial : set.eeg) set.tfr.push_back(morlet_tfr(trial, plan));
  }
  for (auto& t : set.eeg) t.data = zscore_eeg(t.data);
  for (auto& t : set.tfr) t.data = zscore_tfr(t.data);
}

}  // namespace signal
}  // namespace dtsst
