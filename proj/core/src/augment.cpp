#include "dtsst/augment.hpp"

#include <algorithm>

#include "dtsst/errors.hpp"

namespace dtsst::augment {

std::vector<std::pair<std::size_t, std::size_t>> segment_bounds(std::size_t samples,
                                                                std::size_t segments) {
  if (segments == 0) throw DataError("segment count R must be at least 1");
  if (segments > samples) {
    throw DataError("segment count R=" + std::to_string(segments) + " exceeds trial length " +
                    std::to_string(samples));
  }
  const std::size_t base = samples / segments, extra = samples % segments;
  std::vector<std::pair<std::size_t, std::size_t>> bounds;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < segments; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    bounds.emplace_back(begin, begin + len);
    begin += len;
  }
  return bounds;
}

std::pair<EegTrial, TfrTrial> reassemble(const TrialSet& pool, int label,
                                         const std::vector<std::size_t>& donors) {
  if (donors.empty()) throw DataError("reassemble: no donors");
  for (auto d : donors) {
    if (d >= pool.size()) throw DataError("reassemble: donor index out of range");
    if (pool.eeg[d].label != label) throw DataError("reassemble: donor of the wrong class");
  }
  const EegTrial& first = pool.eeg[donors.front()];
  const std::size_t ch = first.channels(), n = first.samples();
  const auto bounds = segment_bounds(n, donors.size());
  const bool paired = pool.has_tfr();
  std::size_t nf = 0;
  if (paired) nf = pool.tfr[donors.front()].data.size(1);

  for (auto d : donors) {
    if (pool.eeg[d].data.shape() != first.data.shape()) {
      throw ShapeError("reassemble: donors differ in shape");
    }
    if (paired && pool.tfr[d].data.shape() != pool.tfr[donors.front()].data.shape()) {
      throw ShapeError("reassemble: donor TFRs differ in shape");
    }
  }

  std::vector<double> eeg(ch * n);
  std::vector<double> tfr(paired ? ch * nf * n : 0);
  for (std::size_t s = 0; s < bounds.size(); ++s) {
    const auto [b, e] = bounds[s];
    const auto src = pool.eeg[donors[s]].data.data();
    for (std::size_t c = 0; c < ch; ++c) {
      std::copy(src.begin() + static_cast<long>(c * n + b), src.begin() + static_cast<long>(c * n + e),
                eeg.begin() + static_cast<long>(c * n + b));
    }
    if (paired) {
      const auto tsrc = pool.tfr[donors[s]].data.data();
      for (std::size_t row = 0; row < ch * nf; ++row) {
        std::copy(tsrc.begin() + static_cast<long>(row * n + b),
                  tsrc.begin() + static_cast<long>(row * n + e),
                  tfr.begin() + static_cast<long>(row * n + b));
      }
    }
  }

  EegTrial out_eeg = first;
  out_eeg.data = Tensor::from(first.data.shape(), std::move(eeg));
  out_eeg.label = label;
  TfrTrial out_tfr;
  if (paired) {
    const TfrTrial& tf = pool.tfr[donors.front()];
    out_tfr.data = Tensor::from(tf.data.shape(), std::move(tfr));
    out_tfr.freqs = tf.freqs;
    out_tfr.fs = tf.fs;
    out_tfr.label = label;
  }
  return {std::move(out_eeg), std::move(out_tfr)};
}

std::pair<EegTrial, TfrTrial> segment_reassemble(const TrialSet& pool, int label,
                                                 std::size_t segments, std::mt19937_64& rng) {
  const auto members = pool.indices_of_class(label);
  if (members.empty()) {
    throw DataError("segment_reassemble: no trials of class " + std::to_string(label));
  }
  segment_bounds(pool.eeg[members.front()].samples(), segments);  // validates R
  std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
  std::vector<std::size_t> donors(segments);
  for (auto& d : donors) d = members[pick(rng)];
  return reassemble(pool, label, donors);
}

TrialSet augment_batch(const TrialSet& pool, const std::vector<int>& classes,
                       const AugmentSpec& spec, std::mt19937_64& rng) {
  if (classes.empty() && spec.count > 0) throw DataError("augment_batch: no classes");
  TrialSet out;
  out.n_classes = pool.n_classes;
  out.class_names = pool.class_names;
  for (std::size_t k = 0; k < spec.count; ++k) {
    auto [eeg, tfr] = segment_reassemble(pool, classes[k % classes.size()], spec.segments, rng);
    out.eeg.push_back(std::move(eeg));
    if (pool.has_tfr()) out.tfr.push_back(std::move(tfr));
  }
  return out;
}

}  // namespace dtsst::augment
