#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtsst::metrics {

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes);
  static ConfusionMatrix from_counts(std::vector<std::vector<std::uint64_t>> counts);
  static ConfusionMatrix from_predictions(std::size_t n_classes, std::span<const int> truth,
                                          std::span<const int> predicted);

  void add(int truth, int predicted, std::uint64_t count = 1);

  std::size_t classes() const { return counts_.size(); }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth][predicted]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t k) const;
  std::uint64_t col_sum(std::size_t k) const;
  const std::vector<std::vector<std::uint64_t>>& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::vector<std::vector<std::uint64_t>> counts_;
};

enum class ChanceModel {
  Marginal,  // sum_k row_k * col_k / total^2
  Uniform,   // 1 / M
};

double accuracy(const ConfusionMatrix& cm);
double chance_agreement(const ConfusionMatrix& cm, ChanceModel model = ChanceModel::Marginal);
// (P_o - P_e) / (1 - P_e). A degenerate P_e == 1 gives 1 when every trial is
// correct and throws DataError otherwise.
double kappa(const ConfusionMatrix& cm, ChanceModel model = ChanceModel::Marginal);
std::vector<double> per_class_recall(const ConfusionMatrix& cm);

struct WilcoxonResult {
  double w = 0.0;        // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  double p_value = 1.0;  // two-sided
  std::size_t n_effective = 0;
  bool exact = false;

  bool operator==(const WilcoxonResult&) const = default;
};

// Paired signed-rank test. Zero differences are dropped; ties share midranks.
// Exact enumeration of the null distribution for n' <= 12, otherwise a normal
// approximation with tie and continuity correction. Returns nullopt when every
// difference is zero.
std::optional<WilcoxonResult> wilcoxon_signed_rank(std::span<const double> a,
                                                   std::span<const double> b);

struct EvalReport {
  double accuracy = 0.0;
  double kappa = 0.0;  // pooled over all trials
  std::optional<double> kappa_mean;  // mean of per-subject kappas
  std::vector<double> per_class_recall;
  ConfusionMatrix confusion{2};
  std::size_t n = 0;
  std::vector<std::string> class_names;
  std::map<std::string, double> p_values;
  std::string config_json;  // echoed verbatim, may be empty

  bool operator==(const EvalReport&) const = default;
};

EvalReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names = {},
                       ChanceModel model = ChanceModel::Marginal);

// Writes confusion.csv and report.json under `dir`.
void export_report(const EvalReport& report, const std::filesystem::path& dir);
EvalReport read_report(const std::filesystem::path& dir);

std::string confusion_csv(const EvalReport& report);

}  // namespace dtsst::metrics
