#pragma once

#include <string>
#include <vector>

#include "dtsst/tensor.hpp"

namespace dtsst {

// One EEG trial: data [ch, T] in microvolts.
struct EegTrial {
  Tensor data;
  double fs = 0.0;
  int label = 0;
  int subject = 0;
  int session = 0;

  std::size_t channels() const { return data.size(0); }
  std::size_t samples() const { return data.size(1); }
};

// Morlet power of one trial: data [ch, F, T], nonnegative.
struct TfrTrial {
  Tensor data;
  std::vector<double> freqs;
  double fs = 0.0;
  int label = 0;

  bool empty() const { return !data.defined(); }
};

// Labeled trials with their paired time-frequency views. `tfr` is either empty
// or index-aligned with `eeg`.
struct TrialSet {
  std::vector<EegTrial> eeg;
  std::vector<TfrTrial> tfr;
  int n_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return eeg.size(); }
  bool empty() const { return eeg.empty(); }
  bool has_tfr() const { return !tfr.empty(); }
  std::vector<std::size_t> indices_of_class(int label) const;
};

}  // namespace dtsst
