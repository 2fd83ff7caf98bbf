#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtsst/model.hpp"
#include "dtsst/tensor.hpp"
#include "dtsst/trial.hpp"

namespace dtsst::train {

struct TrainConfig {
  double lr_max = 1e-4;
  double lr_min = 0.0;
  double weight_decay = 0.0012;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool decoupled_weight_decay = false;
  std::size_t epochs = 1000;
  std::size_t batch = 32;
  std::size_t t_max = 32;  // epochs per cosine cycle
  std::size_t augment_segments = 0;  // R; 0 disables augmentation
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Mean negative log-likelihood of `labels` under softmax(logits), computed
// through log-sum-exp. logits [N, C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// lr_min + (lr_max - lr_min) * (1 + cos(pi * t_cur / t_max)) / 2
double cosine_lr(double t_cur, const TrainConfig& cfg);
// Warm-restart schedule: cosine_lr(epoch mod t_max).
double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg);

// Adam with L2 weight decay added to the gradient (or applied directly to the
// weights when decoupled_weight_decay is set).
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  // Updates every parameter from its accumulated gradient. Parameters without
  // a gradient buffer are treated as having a zero gradient. Throws
  // NumericalError, leaving all parameters untouched, on a non-finite gradient.
  void step(std::vector<NamedTensor>& params, double lr);

  std::size_t steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  TrainConfig cfg_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct Batch {
  Tensor eeg;  // [N, ch, T]
  Tensor tfr;  // [N, ch, F, T]
  std::vector<int> labels;
};

// Stacks the selected trials (and optionally all of `extra`) into one batch.
Batch make_batch(const TrialSet& set, std::span<const std::size_t> indices,
                 const TrialSet* extra = nullptr);

// Eval-mode argmax predictions for every trial, in order.
std::vector<int> predict(DualTsst& model, const TrialSet& set, std::size_t batch = 64);
double accuracy_on(DualTsst& model, const TrialSet& set, std::size_t batch = 64);

// Throws ShapeError naming both geometries when the set does not fit the model.
void check_geometry(const ModelConfig& cfg, const TrialSet& set, const std::string& which);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  std::optional<double> best_test_acc;
};

struct TrainOptions {
  // When set, writes log.csv, best.dtss (if a test split is given) and
  // final.dtss there.
  std::optional<std::filesystem::path> out_dir;
  bool verbose = false;
};

TrainResult train_loop(DualTsst& model, const TrialSet& train, const TrialSet* test,
                       const TrainConfig& cfg, const TrainOptions& options = {});

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace dtsst::train
