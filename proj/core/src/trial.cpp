#include "dtsst/trial.hpp"

namespace dtsst {

std::vector<std::size_t> TrialSet::indices_of_class(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < eeg.size(); ++i) {
    if (eeg[i].label == label) out.push_back(i);
  }
  return out;
}

}  // namespace dtsst
