#pragma once

#include <span>
#include <vector>

#include "dtsst/tensor.hpp"
#include "dtsst/trial.hpp"

namespace dtsst::signal {

// Zero-phase brickwall filter: FFT each channel, zero every bin whose
// frequency lies outside [f_lo, f_hi], inverse FFT. Length is unchanged.
EegTrial bandpass(const EegTrial& trial, double f_lo, double f_hi);

// Crops [t_start, t_end) seconds; the output holds round((t_end - t_start) * fs)
// samples starting at round(t_start * fs).
EegTrial epoch(const EegTrial& recording, double t_start, double t_end);

// Complex Morlet wavelets, one per analysis frequency. Each wavelet uses
// n_cycles = f / 2 and sigma_t = n_cycles / (2 pi f), is sampled at 1/fs over
// [-5 sigma_t, 5 sigma_t] and scaled to unit L2 norm.
struct MorletPlan {
  std::vector<double> freqs;
  std::vector<double> n_cycles;
  std::vector<double> sigma_t;
  double fs = 0.0;
  // taps_re[i][k], taps_im[i][k] for k in [0, len_i), centered at (len_i - 1) / 2.
  std::vector<std::vector<double>> taps_re;
  std::vector<std::vector<double>> taps_im;

  std::size_t n_freqs() const { return freqs.size(); }
  std::size_t max_support() const;
};

MorletPlan make_morlet_plan(std::vector<double> freqs, double fs);

// Evenly spaced grid lo, lo + step, ... up to and including hi (within 1e-9).
std::vector<double> frequency_grid(double lo, double hi, double step);

// Power |W|^2 of the wavelet convolution for every channel and frequency,
// shaped [ch, F, T]. Edges are handled by mirror reflection (no edge repeat).
TfrTrial morlet_tfr(const EegTrial& trial, const MorletPlan& plan);

// (x - mean) / std over `axes`, using the population std. Slices whose std is
// below 1e-12 become zeros.
Tensor zscore(const Tensor& x, std::span<const std::size_t> axes);

// Per-channel normalization over time for [ch, T].
Tensor zscore_eeg(const Tensor& eeg);
// Per (channel, frequency) normalization over time for [ch, F, T].
Tensor zscore_tfr(const Tensor& tfr);

// Computes TFRs for every trial lacking one and z-scores both views in place.
void prepare_views(TrialSet& set, const MorletPlan& plan);

}  // namespace dtsst::signal
