#include "dtsst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dtsst/errors.hpp"

namespace dtsst::metrics {

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes)
    : counts_(n_classes, std::vector<std::uint64_t>(n_classes, 0)) {
  if (n_classes == 0) throw DataError("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::vector<std::vector<std::uint64_t>> counts) {
  ConfusionMatrix cm(counts.size());
  for (const auto& row : counts) {
    if (row.size() != counts.size()) throw DataError("confusion matrix must be square");
  }
  cm.counts_ = std::move(counts);
  return cm;
}

ConfusionMatrix ConfusionMatrix::from_predictions(std::size_t n_classes, std::span<const int> truth,
                                                  std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw DataError("truth/prediction length mismatch");
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t count) {
  const auto m = static_cast<int>(classes());
  if (truth < 0 || truth >= m || predicted < 0 || predicted >= m) {
    throw DataError("confusion matrix: class index out of range");
  }
  counts_[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)] += count;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (const auto& row : counts_) s = std::accumulate(row.begin(), row.end(), s);
  return s;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t k = 0; k < classes(); ++k) s += counts_[k][k];
  return s;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t k) const {
  return std::accumulate(counts_[k].begin(), counts_[k].end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (const auto& row : counts_) s += row[k];
  return s;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw DataError("accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

double chance_agreement(const ConfusionMatrix& cm, ChanceModel model) {
  const auto n = cm.total();
  if (n == 0) throw DataError("chance agreement of an empty confusion matrix");
  if (model == ChanceModel::Uniform) return 1.0 / static_cast<double>(cm.classes());
  const double nd = static_cast<double>(n);
  double pe = 0.0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    pe += static_cast<double>(cm.row_sum(k)) * static_cast<double>(cm.col_sum(k));
  }
  return pe / (nd * nd);
}

double kappa(const ConfusionMatrix& cm, ChanceModel model) {
  const double po = accuracy(cm);
  const double pe = chance_agreement(cm, model);
  if (pe >= 1.0) {
    if (po == 1.0) return 1.0;
    throw DataError("kappa undefined: chance agreement is 1");
  }
  return (po - pe) / (1.0 - pe);
}

std::vector<double> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.classes(), 0.0);
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto row = cm.row_sum(k);
    out[k] = row == 0 ? 0.0 : static_cast<double>(cm.at(k, k)) / static_cast<double>(row);
  }
  return out;
}

std::optional<WilcoxonResult> wilcoxon_signed_rank(std::span<const double> a,
                                                   std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("wilcoxon: samples differ in length");
  if (a.empty()) throw DataError("wilcoxon: empty samples");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (diff != 0.0) d.push_back(diff);
  }
  if (d.empty()) return std::nullopt;
  const std::size_t n = d.size();

  // Midranks of |d|, kept doubled so they stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<std::uint64_t> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const std::uint64_t r2 = (i + 1) + (j + 1);  // twice the midrank of positions i..j
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }

  std::uint64_t wplus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) wplus2 += rank2[i];
  }
  WilcoxonResult r;
  r.n_effective = n;
  r.w_plus = static_cast<double>(wplus2) / 2.0;
  r.w_minus = static_cast<double>(total2 - wplus2) / 2.0;
  r.w = std::min(r.w_plus, r.w_minus);
  const std::uint64_t w2 = std::min(wplus2, total2 - wplus2);

  if (n <= 12) {
    // Null distribution of doubled W+ over all 2^n sign assignments.
    std::vector<double> ways(total2 + 1, 0.0);
    ways[0] = 1.0;
    std::uint64_t reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      reach += rank2[i];
      for (std::uint64_t s = reach + 1; s-- > rank2[i];) ways[s] += ways[s - rank2[i]];
    }
    double extreme = 0.0;
    for (std::uint64_t s = 0; s <= total2; ++s) {
      if (s <= w2 || s >= total2 - w2) extreme += ways[s];
    }
    r.p_value = std::min(1.0, extreme / std::ldexp(1.0, static_cast<int>(n)));
    r.exact = true;
  } else {
    const double nd = static_cast<double>(n);
    const double mean = nd * (nd + 1.0) / 4.0;
    const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
      r.p_value = 1.0;
    } else {
      const double z = std::max(std::abs(r.w_plus - mean) - 0.5, 0.0) / std::sqrt(var);
      r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
  }
  return r;
}

EvalReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names,
                       ChanceModel model) {
  EvalReport r;
  r.confusion = cm;
  r.n = cm.total();
  r.accuracy = accuracy(cm);
  r.kappa = kappa(cm, model);
  r.per_class_recall = per_class_recall(cm);
  if (class_names.empty()) {
    for (std::size_t k = 0; k < cm.classes(); ++k) class_names.push_back(std::to_string(k));
  }
  if (class_names.size() != cm.classes()) throw DataError("class name count mismatch");
  r.class_names = std::move(class_names);
  return r;
}

std::string confusion_csv(const EvalReport& report) {
  std::ostringstream os;
  const auto& cm = report.confusion;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    if (k) os << ',';
    const std::string name = k < report.class_names.size() ? report.class_names[k] : std::to_string(k);
    os << "pred_" << name;
  }
  os << '\n';
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    for (std::size_t j = 0; j < cm.classes(); ++j) {
      if (j) os << ',';
      os << cm.at(i, j);
    }
    os << '\n';
  }
  return os.str();
}

void export_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  {
    std::ofstream os(dir / "confusion.csv");
    if (!os) throw DataError("cannot write " + (dir / "confusion.csv").string());
    os << confusion_csv(report);
  }
  nlohmann::ordered_json j;
  j["accuracy"] = report.accuracy;
  j["kappa"] = report.kappa;
  j["kappa_pooled"] = report.kappa;
  j["kappa_mean"] = report.kappa_mean ? nlohmann::ordered_json(*report.kappa_mean) : nullptr;
  j["n"] = report.n;
  j["class_names"] = report.class_names;
  j["per_class_recall"] = report.per_class_recall;
  j["confusion"] = report.confusion.counts();
  j["p_values"] = report.p_values;
  if (!report.config_json.empty()) {
    j["config"] = nlohmann::ordered_json::parse(report.config_json);
  }
  std::ofstream os(dir / "report.json");
  if (!os) throw DataError("cannot write " + (dir / "report.json").string());
  os << j.dump(2) << '\n';
}

EvalReport read_report(const std::filesystem::path& dir) {
  std::ifstream is(dir / "report.json");
  if (!is) throw DataError("cannot read " + (dir / "report.json").string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(is);
    EvalReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.kappa = j.at("kappa").get<double>();
    if (!j.at("kappa_mean").is_null()) r.kappa_mean = j.at("kappa_mean").get<double>();
    r.n = j.at("n").get<std::size_t>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.per_class_recall = j.at("per_class_recall").get<std::vector<double>>();
    r.confusion = ConfusionMatrix::from_counts(
        j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>());
    r.p_values = j.at("p_values").get<std::map<std::string, double>>();
    if (j.contains("config")) r.config_json = j.at("config").dump();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report.json: ") + e.what());
  }
}

}  // namespace dtsst::metrics
