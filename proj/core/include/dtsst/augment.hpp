#pragma once

#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "dtsst/trial.hpp"

namespace dtsst::augment {

struct AugmentSpec {
  std::size_t segments = 8;  // R
  std::size_t count = 0;     // samples per call of augment_batch
};

// Half-open [begin, end) sample ranges of the R contiguous segments covering
// T samples. The first T mod R segments carry one extra sample.
std::vector<std::pair<std::size_t, std::size_t>> segment_bounds(std::size_t samples,
                                                                std::size_t segments);

// Builds one trial of class `label` whose segment i is copied from donor
// `donors[i]` (an index into `pool`), in both the EEG and the TFR view.
std::pair<EegTrial, TfrTrial> reassemble(const TrialSet& pool, int label,
                                         const std::vector<std::size_t>& donors);

// Segment-and-reassemble: one donor per segment, drawn uniformly with
// replacement from the class-`label` trials of `pool`.
std::pair<EegTrial, TfrTrial> segment_reassemble(const TrialSet& pool, int label,
                                                 std::size_t segments, std::mt19937_64& rng);

// `spec.count` augmented trials, cycling over `classes` in order so the
// result is class balanced. Returned as a TrialSet with paired views.
TrialSet augment_batch(const TrialSet& pool, const std::vector<int>& classes,
                       const AugmentSpec& spec, std::mt19937_64& rng);

}  // namespace dtsst::augment
