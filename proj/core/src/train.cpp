#include "dtsst/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <set>

#include "dtsst/augment.hpp"
#include "dtsst/errors.hpp"
#include "dtsst/ops.hpp"

namespace dtsst::train {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("train config: " + msg); };
  if (!(lr_min >= 0.0 && lr_min < lr_max)) fail("require 0 <= lr_min < lr_max");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be nonnegative");
  if (t_max == 0) fail("t_max must be at least 1");
  if (batch == 0) fail("batch must be at least 1");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) throw ShapeError("cross_entropy expects [N, C] logits");
  const std::size_t n = logits.size(0), c = logits.size(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(c) + ")");
    }
  }
  const Tensor logp = log_softmax(logits);
  std::vector<double> pick(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    pick[i * c + static_cast<std::size_t>(labels[i])] = -1.0 / static_cast<double>(n);
  }
  return sum(mul(logp, Tensor::from(Shape{n, c}, std::move(pick))));
}

double cosine_lr(double t_cur, const TrainConfig& cfg) {
  const double ratio = t_cur / static_cast<double>(cfg.t_max);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * ratio));
}

double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
  return cosine_lr(static_cast<double>(epoch % cfg.t_max), cfg);
}

void Adam::step(std::vector<NamedTensor>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) throw NumericalError("Adam: non-finite gradient in " + p.name);
    }
  }

  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    auto theta = p.mutable_data();
    const bool has = p.has_grad();
    const auto grad = has ? p.grad() : std::span<const double>{};
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.size() != theta.size()) throw ShapeError("Adam: moment shape mismatch for " + params[i].name);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      double g = has ? grad[k] : 0.0;
      if (!cfg_.decoupled_weight_decay) g += cfg_.weight_decay * theta[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      if (cfg_.decoupled_weight_decay) theta[k] -= lr * cfg_.weight_decay * theta[k];
      theta[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
    }
  }
}

Batch make_batch(const TrialSet& set, std::span<const std::size_t> indices, const TrialSet* extra) {
  std::vector<std::pair<const EegTrial*, const TfrTrial*>> rows;
  if (!set.has_tfr()) throw DataError("make_batch: trial set lacks time-frequency views");
  for (auto i : indices) rows.emplace_back(&set.eeg.at(i), &set.tfr.at(i));
  if (extra) {
    if (!extra->has_tfr() && !extra->empty()) throw DataError("make_batch: extra set lacks TFR views");
    for (std::size_t i = 0; i < extra->size(); ++i) rows.emplace_back(&extra->eeg[i], &extra->tfr[i]);
  }
  if (rows.empty()) throw DataError("make_batch: empty batch");
  const Shape es = rows.front().first->data.shape();
  const Shape ts = rows.front().second->data.shape();
  std::vector<double> eeg, tfr;
  eeg.reserve(rows.size() * shape_numel(es));
  tfr.reserve(rows.size() * shape_numel(ts));
  Batch b;
  for (const auto& [e, t] : rows) {
    if (e->data.shape() != es || t->data.shape() != ts) {
      throw ShapeError("make_batch: trials differ in shape (" + shape_str(e->data.shape()) + " vs " +
                       shape_str(es) + ")");
    }
    eeg.insert(eeg.end(), e->data.data().begin(), e->data.data().end());
    tfr.insert(tfr.end(), t->data.data().begin(), t->data.data().end());
    b.labels.push_back(e->label);
  }
  Shape eshape{rows.size()};
  eshape.insert(eshape.end(), es.begin(), es.end());
  Shape tshape{rows.size()};
  tshape.insert(tshape.end(), ts.begin(), ts.end());
  b.eeg = Tensor::from(std::move(eshape), std::move(eeg));
  b.tfr = Tensor::from(std::move(tshape), std::move(tfr));
  return b;
}

std::vector<int> predict(DualTsst& model, const TrialSet& set, std::size_t batch) {
  NoGradGuard guard;
  std::vector<int> out;
  for (std::size_t start = 0; start < set.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch); ++i) idx.push_back(i);
    const Batch b = make_batch(set, idx);
    const Tensor logits = model.forward(b.eeg, b.tfr, false);
    const std::size_t c = logits.size(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.data().subspan(r * c, c);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double accuracy_on(DualTsst& model, const TrialSet& set, std::size_t batch) {
  if (set.empty()) throw DataError("accuracy_on: empty trial set");
  const auto pred = predict(model, set, batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == set.eeg[i].label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

void check_geometry(const ModelConfig& cfg, const TrialSet& set, const std::string& which) {
  const Shape want_eeg{cfg.channels, cfg.samples};
  const Shape want_tfr{cfg.channels, cfg.freqs, cfg.samples};
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.eeg[i].data.shape() != want_eeg) {
      throw ShapeError(which + " trial " + std::to_string(i) + " EEG shape " +
                       shape_str(set.eeg[i].data.shape()) + " does not match model geometry " +
                       shape_str(want_eeg));
    }
    if (set.has_tfr() && set.tfr[i].data.shape() != want_tfr) {
      throw ShapeError(which + " trial " + std::to_string(i) + " TFR shape " +
                       shape_str(set.tfr[i].data.shape()) + " does not match model geometry " +
                       shape_str(want_tfr));
    }
    if (set.eeg[i].label < 0 || static_cast<std::size_t>(set.eeg[i].label) >= cfg.n_classes) {
      throw DataError(which + " trial " + std::to_string(i) + " label " +
                      std::to_string(set.eeg[i].label) + " outside model classes");
    }
  }
}

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch,lr,loss,train_acc,test_acc\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,", e.epoch, e.lr, e.loss, e.train_acc);
    os << buf;
    if (e.test_acc) {
      std::snprintf(buf, sizeof buf, "%.17g", *e.test_acc);
      os << buf;
    }
    os << '\n';
  }
}

TrainResult train_loop(DualTsst& model, const TrialSet& train, const TrialSet* test,
                       const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train.empty()) throw DataError("train_loop: empty training split");
  if (!train.has_tfr()) throw DataError("train_loop: training split lacks TFR views");
  check_geometry(model.config(), train, "train");
  if (test && !test->empty()) check_geometry(model.config(), *test, "test");
  const bool has_test = test && !test->empty();

  std::seed_seq shuffle_seed{cfg.seed, std::uint64_t{1}};
  std::seed_seq augment_seed{cfg.seed, std::uint64_t{2}};
  std::mt19937_64 shuffle_rng(shuffle_seed);
  std::mt19937_64 augment_rng(augment_seed);

  Adam adam(cfg);
  TrainResult result;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0, correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);

      TrialSet augmented;
      if (cfg.augment_segments > 0) {
        std::set<int> present;
        for (auto i : idx) present.insert(train.eeg[i].label);
        augmented = augment::augment_batch(train, {present.begin(), present.end()},
                                           {cfg.augment_segments, idx.size()}, augment_rng);
      }
      const Batch b = make_batch(train, idx, cfg.augment_segments > 0 ? &augmented : nullptr);

      double loss_value = 0.0;
      try {
        const Tensor logits = model.forward(b.eeg, b.tfr, true);
        const Tensor loss = cross_entropy(logits, b.labels);
        loss_value = loss.item();
        const std::size_t c = logits.size(1);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const auto row = logits.data().subspan(r * c, c);
          const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
          correct += pred == b.labels[r] ? 1 : 0;
        }
        model.zero_grad();
        backward(loss);
        adam.step(model.parameters(), lr);
      } catch (const NumericalError& e) {
        Graph::current().clear();
        throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch_index) + ")");
      }
      loss_sum += loss_value * static_cast<double>(b.labels.size());
      loss_count += b.labels.size();
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.loss = loss_sum / static_cast<double>(loss_count);
    entry.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    if (has_test) {
      entry.test_acc = accuracy_on(model, *test);
      if (!result.best_test_acc || *entry.test_acc > *result.best_test_acc) {
        result.best_test_acc = entry.test_acc;
        result.best_epoch = epoch;
        if (options.out_dir) save_checkpoint(model, *options.out_dir / "best.dtss");
      }
    } else {
      result.best_epoch = epoch;
    }
    if (options.verbose) {
      std::fprintf(stderr, "epoch %zu lr %.3g loss %.5f train_acc %.4f", epoch, lr, entry.loss,
                   entry.train_acc);
      if (entry.test_acc) std::fprintf(stderr, " test_acc %.4f", *entry.test_acc);
      std::fprintf(stderr, "\n");
    }
    result.log.push_back(entry);
  }

  if (options.out_dir) {
    save_checkpoint(model, *options.out_dir / "final.dtss");
    write_log_csv(*options.out_dir / "log.csv", result.log);
  }
  return result;
}

}  // namespace dtsst::train
