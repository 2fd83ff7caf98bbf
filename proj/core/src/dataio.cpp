#include "dtsst/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "dtsst/errors.hpp"
#include "dtsst/signal.hpp"

namespace dtsst::dataio {

namespace fs = std::filesystem;

namespace {

constexpr char kTensorMagic[4] = {'E', 'E', 'G', 'T'};
constexpr std::uint32_t kTensorVersion = 1;

void write_tensor_stream(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  binio::put_u32(os, kTensorVersion);
  binio::put_tensor_body(os, t);
}

Tensor read_tensor_stream(std::istream& is, const std::string& what) {
  char magic[4];
  binio::read_exact(is, magic, 4, what + " header");
  if (std::string(magic, 4) != std::string(kTensorMagic, 4)) throw DataError("bad magic in " + what);
  const std::uint32_t version = binio::get_u32(is, what + " header");
  if (version != kTensorVersion) {
    throw DataError("unsupported version " + std::to_string(version) + " in " + what);
  }
  return binio::get_tensor_body(is, what);
}

std::string trial_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trial_%05zu", i);
  return buf;
}

std::string tfr_path_for(const std::string& file, const std::string& suffix) {
  const std::string ext = ".eegt";
  std::string stem = file;
  if (stem.size() >= ext.size() && stem.compare(stem.size() - ext.size(), ext.size(), ext) == 0) {
    stem.resize(stem.size() - ext.size());
  }
  return stem + suffix;
}

}  // namespace

void write_tensor(const fs::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  write_tensor_stream(os, t);
  if (!os) throw DataError("failed writing " + path.string());
}

Tensor read_tensor(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return read_tensor_stream(is, path.string());
}

std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor_stream(os, t);
  return os.str();
}

Tensor decode_tensor(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor_stream(is, "tensor bytes");
}

DatasetManifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(is);
    DatasetManifest m;
    m.name = j.value("name", std::string{});
    m.fs = j.at("fs").get<double>();
    m.channels = j.at("channels").get<std::vector<std::string>>();
    m.n_classes = j.at("n_classes").get<int>();
    m.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& t : j.at("trials")) {
      TrialEntry e;
      e.file = t.at("file").get<std::string>();
      e.label = t.at("label").get<int>();
      e.subject = t.value("subject", 0);
      e.session = t.value("session", 0);
      e.split = t.value("split", std::string{});
      m.trials.push_back(std::move(e));
    }
    if (j.contains("tfr") && !j.at("tfr").is_null()) {
      TfrInfo info;
      info.freqs = j.at("tfr").at("freqs").get<std::vector<double>>();
      info.suffix = j.at("tfr").value("suffix", info.suffix);
      info.n_cycles_rule = j.at("tfr").value("n_cycles_rule", info.n_cycles_rule);
      m.tfr = std::move(info);
    }
    if (m.fs <= 0.0) throw DataError("manifest fs must be positive");
    if (m.n_classes < 1) throw DataError("manifest n_classes must be positive");
    if (m.class_names.empty()) {
      for (int k = 0; k < m.n_classes; ++k) m.class_names.push_back(std::to_string(k));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& dir, const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["name"] = m.name;
  j["fs"] = m.fs;
  j["channels"] = m.channels;
  j["n_classes"] = m.n_classes;
  j["class_names"] = m.class_names;
  auto trials = nlohmann::ordered_json::array();
  for (const auto& t : m.trials) {
    nlohmann::ordered_json e;
    e["file"] = t.file;
    e["label"] = t.label;
    e["subject"] = t.subject;
    e["session"] = t.session;
    e["split"] = t.split;
    trials.push_back(std::move(e));
  }
  j["trials"] = std::move(trials);
  if (m.tfr) {
    j["tfr"] = {{"freqs", m.tfr->freqs},
                {"suffix", m.tfr->suffix},
                {"n_cycles_rule", m.tfr->n_cycles_rule}};
  }
  fs::create_directories(dir);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write manifest in " + dir.string());
  os << j.dump(2) << '\n';
}

std::vector<bool> kfold_test_mask(std::size_t n, const SplitPlan& plan) {
  if (plan.k < 2) throw DataError("k-fold split needs k >= 2");
  if (plan.fold >= plan.k) throw DataError("fold index out of range");
  if (n < plan.k) throw DataError("fewer trials than folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(plan.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> mask(n, false);
  const std::size_t begin = plan.fold * n / plan.k, end = (plan.fold + 1) * n / plan.k;
  for (std::size_t i = begin; i < end; ++i) mask[order[i]] = true;
  return mask;
}

LoadedDataset load_dataset(const fs::path& dir, const SplitPlan& plan) {
  LoadedDataset out;
  out.manifest = read_manifest(dir);
  const auto& m = out.manifest;
  TrialSet all;
  all.n_classes = m.n_classes;
  all.class_names = m.class_names;
  Shape eeg_shape;
  for (std::size_t i = 0; i < m.trials.size(); ++i) {
    const auto& e = m.trials[i];
    if (e.label < 0 || e.label >= m.n_classes) {
      throw DataError("trial " + e.file + ": label " + std::to_string(e.label) + " outside [0, " +
                      std::to_string(m.n_classes) + ")");
    }
    const fs::path path = dir / e.file;
    if (!fs::exists(path)) throw DataError("missing trial file " + path.string());
    EegTrial trial;
    trial.data = read_tensor(path);
    trial.fs = m.fs;
    trial.label = e.label;
    trial.subject = e.subject;
    trial.session = e.session;
    if (trial.data.dim() != 2 || trial.data.size(0) != m.channels.size()) {
      throw ShapeError("trial " + e.file + " has shape " + shape_str(trial.data.shape()) +
                       ", expected [" + std::to_string(m.channels.size()) + ", T]");
    }
    if (eeg_shape.empty()) eeg_shape = trial.data.shape();
    if (trial.data.shape() != eeg_shape) {
      throw ShapeError("trial " + e.file + " has shape " + shape_str(trial.data.shape()) +
                       ", earlier trials " + shape_str(eeg_shape));
    }
    if (m.tfr) {
      const fs::path tpath = dir / tfr_path_for(e.file, m.tfr->suffix);
      if (!fs::exists(tpath)) throw DataError("missing TFR sidecar " + tpath.string());
      TfrTrial tfr;
      tfr.data = read_tensor(tpath);
      const Shape want{eeg_shape[0], m.tfr->freqs.size(), eeg_shape[1]};
      if (tfr.data.shape() != want) {
        throw ShapeError("sidecar " + tpath.string() + " has shape " + shape_str(tfr.data.shape()) +
                         ", expected " + shape_str(want));
      }
      tfr.freqs = m.tfr->freqs;
      tfr.fs = m.fs;
      tfr.label = e.label;
      all.tfr.push_back(std::move(tfr));
    }
    all.eeg.push_back(std::move(trial));
  }

  std::vector<bool> is_test(m.trials.size(), false);
  if (plan.mode == SplitMode::KFold) {
    is_test = kfold_test_mask(m.trials.size(), plan);
  } else {
    for (std::size_t i = 0; i < m.trials.size(); ++i) is_test[i] = m.trials[i].split == "test";
  }
  for (TrialSet* s : {&out.train, &out.test}) {
    s->n_classes = all.n_classes;
    s->class_names = all.class_names;
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    TrialSet& dst = is_test[i] ? out.test : out.train;
    dst.eeg.push_back(all.eeg[i]);
    if (all.has_tfr()) dst.tfr.push_back(all.tfr[i]);
  }
  return out;
}

void save_dataset(const fs::path& dir, const TrialSet& set, const std::string& name,
                  const std::vector<std::string>& channel_names,
                  const std::vector<std::string>& splits) {
  if (!splits.empty() && splits.size() != set.size()) throw DataError("split tag count mismatch");
  if (set.has_tfr() && set.tfr.size() != set.size()) throw DataError("TFR count mismatch");
  fs::create_directories(dir / "trials");
  DatasetManifest m;
  m.name = name;
  m.n_classes = set.n_classes;
  m.class_names = set.class_names;
  if (m.class_names.empty()) {
    for (int k = 0; k < m.n_classes; ++k) m.class_names.push_back(std::to_string(k));
  }
  m.channels = channel_names;
  if (!set.empty()) {
    m.fs = set.eeg.front().fs;
    if (m.channels.empty()) {
      for (std::size_t c = 0; c < set.eeg.front().channels(); ++c) {
        m.channels.push_back("ch" + std::to_string(c));
      }
    }
  }
  if (set.has_tfr()) m.tfr = TfrInfo{set.tfr.front().freqs};
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::string file = "trials/" + trial_stem(i) + ".eegt";
    write_tensor(dir / file, set.eeg[i].data);
    if (m.tfr) write_tensor(dir / tfr_path_for(file, m.tfr->suffix), set.tfr[i].data);
    m.trials.push_back({file, set.eeg[i].label, set.eeg[i].subject, set.eeg[i].session,
                        splits.empty() ? std::string{} : splits[i]});
  }
  write_manifest(dir, m);
}

TrialSet synth(const SynthSpec& spec) {
  if (spec.fs <= 0.0) throw DataError("synth: fs must be positive");
  if (spec.channels == 0 || spec.samples == 0) throw DataError("synth: empty geometry");
  if (spec.classes.empty()) throw DataError("synth: no classes");
  if (spec.noise < 0.0) throw DataError("synth: noise must be nonnegative");
  for (const auto& c : spec.classes) {
    if (!(c.freq > 0.0 && c.freq < spec.fs / 2.0)) {
      throw DataError("synth: class frequency " + std::to_string(c.freq) + " Hz outside (0, fs/2)");
    }
    for (auto ch : c.channels) {
      if (ch >= spec.channels) throw DataError("synth: channel mask index out of range");
    }
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise_dist(0.0, 1.0);

  TrialSet set;
  set.n_classes = static_cast<int>(spec.classes.size());
  for (std::size_t k = 0; k < spec.classes.size(); ++k) set.class_names.push_back(std::to_string(k));
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    const auto& cls = spec.classes[k];
    std::vector<bool> active(spec.channels, cls.channels.empty());
    for (auto ch : cls.channels) active[ch] = true;
    for (std::size_t i = 0; i < spec.n_per_class; ++i) {
      const double phase = phase_dist(rng);
      std::vector<double> v(spec.channels * spec.samples);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        for (std::size_t t = 0; t < spec.samples; ++t) {
          double x = 0.0;
          if (active[ch]) {
            x = std::sin(2.0 * std::numbers::pi * cls.freq * static_cast<double>(t) / spec.fs + phase);
          }
          if (spec.noise > 0.0) x += spec.noise * noise_dist(rng);
          v[ch * spec.samples + t] = x;
        }
      }
      EegTrial trial;
      trial.data = Tensor::from(Shape{spec.channels, spec.samples}, std::move(v));
      trial.fs = spec.fs;
      trial.label = static_cast<int>(k);
      trial.subject = 1;
      set.eeg.push_back(std::move(trial));
    }
  }
  return set;
}

Preset preset(const std::string& name) {
  Preset p;
  p.name = name;
  if (name == "bci2a") {
    p.model.channels = 22;
    p.model.samples = 1000;
    p.model.freqs = 40;
    p.model.n_classes = 4;
    p.signal.fs = 250.0;
    p.signal.window = {{2.0, 6.0}};
    p.signal.band = {{0.0, 40.0}};
    p.signal.freqs = signal::frequency_grid(1.0, 40.0, 1.0);
    p.augment_segments = 8;
  } else if (name == "bci2b") {
    p.model.channels = 3;
    p.model.samples = 1125;
    p.model.freqs = 40;
    p.model.n_classes = 2;
    p.signal.fs = 250.0;
    p.signal.window = {{3.0, 7.5}};
    p.signal.band = {{0.0, 40.0}};
    p.signal.freqs = signal::frequency_grid(1.0, 40.0, 1.0);
    p.augment_segments = 9;
  } else if (name == "seed") {
    p.model.channels = 62;
    p.model.samples = 200;
    p.model.freqs = 50;
    p.model.n_classes = 3;
    p.signal.fs = 200.0;
    p.signal.window = {{0.0, 1.0}};
    p.signal.band = {{0.5, 50.0}};
    p.signal.freqs = signal::frequency_grid(1.0, 50.0, 1.0);
    p.split.mode = SplitMode::KFold;
    p.split.k = 5;
    p.augment_segments = 0;
  } else if (name == "mini") {
    ModelConfig& m = p.model;
    m.channels = 4;
    m.samples = 64;
    m.freqs = 6;
    m.n_classes = 2;
    m.d1 = 3;
    m.d2 = 8;
    m.tc1 = 7;
    m.pool1 = 16;
    m.pool1_stride = 4;
    m.tc2 = 9;
    m.pool2 = 8;
    m.pool2_stride = 4;
    m.encoder_layers = 2;
    m.heads = 2;
    p.signal.fs = 128.0;
    p.signal.freqs = signal::frequency_grid(5.0, 30.0, 5.0);
    p.augment_segments = 4;
  } else {
    throw DataError("unknown preset '" + name + "' (expected bci2a, bci2b, seed or mini)");
  }
  return p;
}

}  // namespace dtsst::dataio
