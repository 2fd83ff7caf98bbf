#include "dtsst/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dtsst/train.hpp"

namespace dtsst {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor>& params,
                          double h) {
  for (auto& p : params) p.value.zero_grad();
  Graph::current().clear();
  backward(loss_fn());

  GradCheckResult result;
  NoGradGuard guard;
  for (auto& p : params) {
    auto theta = p.value.mutable_data();
    const std::vector<double> analytic =
        p.value.has_grad() ? std::vector<double>(p.value.grad().begin(), p.value.grad().end())
                           : std::vector<double>(theta.size(), 0.0);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double saved = theta[k];
      theta[k] = saved + h;
      const double up = loss_fn().item();
      theta[k] = saved - h;
      const double down = loss_fn().item();
      theta[k] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[k], numeric);
      ++result.checked;
      if (err > result.max_rel_error || result.worst_name.empty()) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        if (err >= result.max_rel_error) {
          result.worst_name = p.name;
          result.worst_index = k;
          result.worst_analytic = analytic[k];
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

GradCheckResult gradcheck_model(DualTsst& model, const Tensor& eeg, const Tensor& tfr,
                                std::span<const int> labels, double h) {
  const std::vector<int> y(labels.begin(), labels.end());
  auto loss_fn = [&]() { return train::cross_entropy(model.forward(eeg, tfr, true), y); };
  return gradcheck(loss_fn, model.parameters(), h);
}

}  // namespace dtsst
