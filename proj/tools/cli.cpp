#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtsst/augment.hpp"
#include "dtsst/errors.hpp"
#include "dtsst/gradcheck.hpp"
#include "dtsst/metrics.hpp"
#include "dtsst/signal.hpp"

namespace dtsst::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_number(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &pos);
  } catch (const std::exception&) {
    throw UsageError("cannot parse '" + text + "' as a number in " + what);
  }
  if (pos != t.size()) throw UsageError("cannot parse '" + text + "' as a number in " + what);
  return v;
}

// "a,b" -> pair; "none" -> nullopt.
std::optional<std::pair<double, double>> parse_range(const std::string& text, const std::string& what) {
  if (trim(text) == "none") return std::nullopt;
  const auto parts = split_on(text, ',');
  if (parts.size() != 2) throw UsageError(what + " expects 'lo,hi' or 'none', got '" + text + "'");
  return std::make_pair(parse_number(parts[0], what), parse_number(parts[1], what));
}

json range_json(const std::optional<std::pair<double, double>>& r) {
  if (!r) return nullptr;
  return json::array({r->first, r->second});
}

std::optional<std::pair<double, double>> range_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 2) throw DataError("range entries must hold exactly two numbers");
  return std::make_pair(v[0], v[1]);
}

const char* split_mode_name(dataio::SplitMode m) {
  return m == dataio::SplitMode::KFold ? "k-fold" : "fixed-session";
}

dataio::SplitMode split_mode_from(const std::string& s) {
  if (s == "k-fold") return dataio::SplitMode::KFold;
  if (s == "fixed-session") return dataio::SplitMode::FixedSession;
  throw DataError("unknown split mode '" + s + "' (expected fixed-session or k-fold)");
}

json train_json(const train::TrainConfig& t) {
  json j;
  j["lr_max"] = t.lr_max;
  j["lr_min"] = t.lr_min;
  j["weight_decay"] = t.weight_decay;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["decoupled_weight_decay"] = t.decoupled_weight_decay;
  j["epochs"] = t.epochs;
  j["batch"] = t.batch;
  j["t_max"] = t.t_max;
  j["augment_segments"] = t.augment_segments;
  j["seed"] = t.seed;
  return j;
}

void overlay_train(train::TrainConfig& t, const json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "lr_max") t.lr_max = v.get<double>();
    else if (k == "lr_min") t.lr_min = v.get<double>();
    else if (k == "weight_decay") t.weight_decay = v.get<double>();
    else if (k == "beta1") t.beta1 = v.get<double>();
    else if (k == "beta2") t.beta2 = v.get<double>();
    else if (k == "adam_eps") t.adam_eps = v.get<double>();
    else if (k == "decoupled_weight_decay") t.decoupled_weight_decay = v.get<bool>();
    else if (k == "epochs") t.epochs = v.get<std::size_t>();
    else if (k == "batch") t.batch = v.get<std::size_t>();
    else if (k == "t_max") t.t_max = v.get<std::size_t>();
    else if (k == "augment_segments") t.augment_segments = v.get<std::size_t>();
    else if (k == "seed") t.seed = v.get<std::uint64_t>();
    else throw DataError("unknown config key 'train." + k + "'");
  }
}

json signal_json(const dataio::SignalSettings& s) {
  json j;
  j["fs"] = s.fs;
  j["freqs"] = s.freqs;
  j["window"] = range_json(s.window);
  j["band"] = range_json(s.band);
  return j;
}

void overlay_signal(dataio::SignalSettings& s, const json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "fs") s.fs = v.get<double>();
    else if (k == "freqs") s.freqs = v.get<std::vector<double>>();
    else if (k == "window") s.window = range_from_json(v);
    else if (k == "band") s.band = range_from_json(v);
    else throw DataError("unknown config key 'signal." + k + "'");
  }
}

json split_json(const dataio::SplitPlan& p) {
  json j;
  j["mode"] = split_mode_name(p.mode);
  j["k"] = p.k;
  j["fold"] = p.fold;
  j["seed"] = p.seed;
  return j;
}

void overlay_split(dataio::SplitPlan& p, const json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "mode") p.mode = split_mode_from(v.get<std::string>());
    else if (k == "k") p.k = v.get<std::size_t>();
    else if (k == "fold") p.fold = v.get<std::size_t>();
    else if (k == "seed") p.seed = v.get<std::uint64_t>();
    else throw DataError("unknown config key 'data." + k + "'");
  }
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("malformed " + what + ": " + e.what());
  }
}

void write_resolved(const fs::path& dir, const json& command, const RunConfig* cfg) {
  json j = cfg ? parse_json(run_config_to_json(*cfg), "config") : json::object();
  j["command"] = command;
  fs::create_directories(dir);
  write_text(dir / "resolved_config.json", j.dump(2) + "\n");
}

signal::MorletPlan plan_for(const RunConfig& cfg, double data_fs) {
  if (std::abs(cfg.signal.fs - data_fs) > 1e-9) {
    throw DataError("dataset is sampled at " + fmt(data_fs, 3) + " Hz but the configuration expects " +
                    fmt(cfg.signal.fs, 3) + " Hz");
  }
  return signal::make_morlet_plan(cfg.signal.freqs, data_fs);
}

void check_sidecar_grid(const dataio::DatasetManifest& m, const RunConfig& cfg) {
  if (!m.tfr) return;
  const auto& a = m.tfr->freqs;
  const auto& b = cfg.signal.freqs;
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = std::abs(a[i] - b[i]) < 1e-9;
  if (!same) {
    throw DataError("dataset TFR sidecars use a " + std::to_string(a.size()) +
                    "-frequency grid that differs from the configured " + std::to_string(b.size()) +
                    "-frequency grid");
  }
}

bool given(const CLI::Option* o) { return o && o->count() > 0; }

// Options shared by every command that resolves a RunConfig.
struct ConfigFlags {
  std::string default_preset = "bci2a";
  std::string preset;
  std::string config;
  CLI::Option* preset_opt = nullptr;

  std::uint64_t seed = 0;
  std::size_t epochs = 0, batch = 0, r = 0, t_max = 0;
  double lr = 0.0, lr_min = 0.0, weight_decay = 0.0, dropout = 0.0;
  bool decoupled = false, per_head_scaling = false;
  CLI::Option *seed_opt = nullptr, *epochs_opt = nullptr, *batch_opt = nullptr, *r_opt = nullptr,
              *t_max_opt = nullptr, *lr_opt = nullptr, *lr_min_opt = nullptr, *wd_opt = nullptr,
              *dropout_opt = nullptr;

  double freq_lo = 0.0, freq_hi = 0.0, freq_step = 0.0;
  std::string window, band;
  CLI::Option *lo_opt = nullptr, *hi_opt = nullptr, *step_opt = nullptr, *window_opt = nullptr,
              *band_opt = nullptr;

  std::string split_mode;
  std::size_t k = 0, fold = 0;
  std::uint64_t split_seed = 0;
  CLI::Option *mode_opt = nullptr, *k_opt = nullptr, *fold_opt = nullptr, *split_seed_opt = nullptr;

  Ablation ablation;
  std::string ablation_list;

  void add_config(CLI::App* app, const std::string& fallback) {
    default_preset = fallback;
    preset_opt = app->add_option("--preset", preset, "bci2a, bci2b, seed or mini (default " + fallback + ")")
                     ->check(CLI::IsMember({"bci2a", "bci2b", "seed", "mini"}));
    app->add_option("--config", config, "JSON config with preset/model/train/signal/data sections")
        ->check(CLI::ExistingFile);
  }

  void add_seed(CLI::App* app) { seed_opt = app->add_option("--seed", seed, "run seed"); }

  void add_train(CLI::App* app) {
    add_seed(app);
    epochs_opt = app->add_option("--epochs", epochs, "training epochs");
    lr_opt = app->add_option("--lr", lr, "peak learning rate");
    lr_min_opt = app->add_option("--lr-min", lr_min, "floor of the cosine schedule");
    batch_opt = app->add_option("--batch", batch, "batch size");
    r_opt = app->add_option("--r", r, "augmentation segments (0 disables)");
    t_max_opt = app->add_option("--t-max", t_max, "epochs per cosine cycle");
    wd_opt = app->add_option("--weight-decay", weight_decay, "L2 weight decay");
    app->add_flag("--decoupled-wd", decoupled, "apply weight decay directly to the weights");
    app->add_flag("--per-head-scaling", per_head_scaling, "scale attention by sqrt(d2 / heads)");
    dropout_opt = app->add_option("--dropout", dropout, "dropout probability");
  }

  void add_ablation(CLI::App* app) {
    app->add_flag("--no-transformer", ablation.no_transformer, "skip the encoder");
    app->add_flag("--no-branch1", ablation.no_branch1, "drop the raw-EEG branch");
    app->add_flag("--no-b2-input1", ablation.no_b2_input1, "drop the first TFR view");
    app->add_flag("--no-b2-input2", ablation.no_b2_input2, "drop the second TFR view");
    app->add_flag("--no-augment", ablation.no_augment, "disable segment-and-reassemble");
    app->add_option("--ablation", ablation_list, "comma-separated list, e.g. no-transformer,no-augment");
  }

  void add_signal(CLI::App* app) {
    lo_opt = app->add_option("--freq-lo", freq_lo, "lowest analysis frequency (Hz)");
    hi_opt = app->add_option("--freq-hi", freq_hi, "highest analysis frequency (Hz)");
    step_opt = app->add_option("--freq-step", freq_step, "frequency spacing (Hz)");
    window_opt = app->add_option("--window", window, "epoch window 'start,end' in seconds, or none");
    band_opt = app->add_option("--band", band, "band-pass corners 'lo,hi' in Hz, or none");
  }

  void add_split(CLI::App* app) {
    mode_opt = app->add_option("--split-mode", split_mode, "fixed-session or k-fold")
                   ->check(CLI::IsMember({"fixed-session", "k-fold"}));
    k_opt = app->add_option("--k", k, "number of folds");
    fold_opt = app->add_option("--fold", fold, "test fold index");
    split_seed_opt = app->add_option("--split-seed", split_seed, "fold shuffle seed");
  }

  bool has_explicit_config() const { return given(preset_opt) || !config.empty(); }

  RunConfig resolve() const {
    std::string name = given(preset_opt) ? preset : std::string{};
    std::string text;
    if (!config.empty()) {
      text = read_text(config);
      const json j = parse_json(text, "config " + config);
      if (name.empty() && j.is_object() && j.contains("preset")) name = j.at("preset").get<std::string>();
    }
    if (name.empty()) name = default_preset;
    RunConfig cfg = preset_run_config(name);
    if (!text.empty()) {
      overlay_json(cfg, text);
      cfg.preset = name;
    }
    auto& t = cfg.train;
    if (given(seed_opt)) t.seed = seed;
    if (given(epochs_opt)) t.epochs = epochs;
    if (given(lr_opt)) t.lr_max = lr;
    if (given(lr_min_opt)) t.lr_min = lr_min;
    if (given(batch_opt)) t.batch = batch;
    if (given(r_opt)) t.augment_segments = r;
    if (given(t_max_opt)) t.t_max = t_max;
    if (given(wd_opt)) t.weight_decay = weight_decay;
    if (decoupled) t.decoupled_weight_decay = true;
    if (per_head_scaling) cfg.model.per_head_scaling = true;
    if (given(dropout_opt)) cfg.model.dropout = dropout;

    if (given(lo_opt) || given(hi_opt) || given(step_opt)) {
      const auto& f = cfg.signal.freqs;
      double lo = f.empty() ? 1.0 : f.front();
      double hi = f.empty() ? 40.0 : f.back();
      double step = f.size() > 1 ? f[1] - f[0] : 1.0;
      if (given(lo_opt)) lo = freq_lo;
      if (given(hi_opt)) hi = freq_hi;
      if (given(step_opt)) step = freq_step;
      if (!(step > 0.0) || hi < lo) throw DataError("frequency grid needs step > 0 and hi >= lo");
      cfg.signal.freqs = signal::frequency_grid(lo, hi, step);
      cfg.model.freqs = cfg.signal.freqs.size();
    }
    if (given(window_opt)) cfg.signal.window = parse_range(window, "--window");
    if (given(band_opt)) cfg.signal.band = parse_range(band, "--band");

    if (given(mode_opt)) cfg.split.mode = split_mode_from(split_mode);
    if (given(k_opt)) cfg.split.k = k;
    if (given(fold_opt)) cfg.split.fold = fold;
    if (given(split_seed_opt)) cfg.split.seed = split_seed;

    Ablation a = ablation;
    if (!ablation_list.empty()) {
      const Ablation extra = parse_ablation_list(ablation_list);
      a.no_transformer |= extra.no_transformer;
      a.no_branch1 |= extra.no_branch1;
      a.no_b2_input1 |= extra.no_b2_input1;
      a.no_b2_input2 |= extra.no_b2_input2;
      a.no_augment |= extra.no_augment;
    }
    apply_ablation(cfg, a);
    validate(cfg);
    return cfg;
  }
};

int guarded(const std::function<void()>& body, std::ostream& err) {
  try {
    body();
    return kOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kDataFailure;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataFailure;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const GraphError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataFailure;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kDataFailure;
  }
}

// ---- synth ---------------------------------------------------------------

struct SynthArgs {
  std::string classes = "10@0+1,20@2+3";
  std::size_t n = 32, n_test = 0, ch = 4, t = 64;
  double fs = 128.0, noise = 0.5;
  std::uint64_t seed = 0;
  std::string out;
};

std::vector<dataio::SynthClass> parse_classes(const std::string& text) {
  std::vector<dataio::SynthClass> classes;
  for (const auto& raw : split_on(text, ',')) {
    const std::string tok = trim(raw);
    if (tok.empty()) throw UsageError("empty entry in --classes '" + text + "'");
    dataio::SynthClass c;
    const auto at = tok.find('@');
    c.freq = parse_number(tok.substr(0, at), "--classes");
    if (at != std::string::npos) {
      for (const auto& ch : split_on(tok.substr(at + 1), '+')) {
        const double v = parse_number(ch, "--classes");
        if (v < 0 || v != std::floor(v)) throw UsageError("channel index '" + ch + "' is not a valid index");
        c.channels.push_back(static_cast<std::size_t>(v));
      }
    }
    classes.push_back(std::move(c));
  }
  return classes;
}

void run_synth(const SynthArgs& a, std::ostream& out) {
  dataio::SynthSpec spec;
  spec.classes = parse_classes(a.classes);
  spec.n_per_class = a.n + a.n_test;
  spec.channels = a.ch;
  spec.samples = a.t;
  spec.fs = a.fs;
  spec.noise = a.noise;
  spec.seed = a.seed;
  const TrialSet set = dataio::synth(spec);
  std::vector<std::string> splits;
  if (a.n_test > 0) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      splits.push_back(i % spec.n_per_class < a.n ? "train" : "test");
    }
  }
  dataio::save_dataset(a.out, set, "synth", {}, splits);
  json cmd;
  cmd["name"] = "synth";
  cmd["classes"] = a.classes;
  cmd["n"] = a.n;
  cmd["n_test"] = a.n_test;
  cmd["ch"] = a.ch;
  cmd["t"] = a.t;
  cmd["fs"] = a.fs;
  cmd["noise"] = a.noise;
  cmd["seed"] = a.seed;
  write_resolved(a.out, cmd, nullptr);
  out << "wrote " << set.size() << " trials (" << spec.classes.size() << " classes) to " << a.out << '\n';
}

// ---- transform -----------------------------------------------------------

void run_transform(const ConfigFlags& flags, const std::string& data, const std::string& out_dir,
                   std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  const auto m = dataio::read_manifest(data);
  const auto plan = plan_for(cfg, m.fs);
  TrialSet set;
  set.n_classes = m.n_classes;
  set.class_names = m.class_names;
  std::vector<std::string> splits;
  for (const auto& e : m.trials) {
    if (e.label < 0 || e.label >= m.n_classes) {
      throw DataError("trial " + e.file + ": label " + std::to_string(e.label) + " out of range");
    }
    EegTrial trial;
    trial.data = dataio::read_tensor(fs::path(data) / e.file);
    if (trial.data.dim() != 2 || trial.data.size(0) != m.channels.size()) {
      throw ShapeError("trial " + e.file + " has shape " + shape_str(trial.data.shape()) + ", expected [" +
                       std::to_string(m.channels.size()) + ", T]");
    }
    trial.fs = m.fs;
    trial.label = e.label;
    trial.subject = e.subject;
    trial.session = e.session;
    if (cfg.signal.band) trial = signal::bandpass(trial, cfg.signal.band->first, cfg.signal.band->second);
    if (cfg.signal.window) trial = signal::epoch(trial, cfg.signal.window->first, cfg.signal.window->second);
    set.tfr.push_back(signal::morlet_tfr(trial, plan));
    set.eeg.push_back(std::move(trial));
    splits.push_back(e.split);
  }
  dataio::save_dataset(out_dir, set, m.name, m.channels, splits);
  write_resolved(out_dir, json{{"name", "transform"}, {"data", data}}, &cfg);
  out << "transformed " << set.size() << " trials onto " << cfg.signal.freqs.size() << " frequencies in "
      << out_dir << '\n';
}

// ---- augment -------------------------------------------------------------

struct AugmentArgs {
  std::string data, out;
  std::size_t r = 0, count = 16;
  std::uint64_t seed = 0;
  CLI::Option* r_opt = nullptr;
};

void run_augment(const ConfigFlags& flags, const AugmentArgs& a, std::ostream& out) {
  RunConfig cfg = flags.resolve();
  const std::size_t segments = given(a.r_opt) ? a.r : cfg.train.augment_segments;
  if (segments == 0) throw DataError("augmentation is disabled for this configuration; pass --r");
  cfg.train.augment_segments = segments;
  auto loaded = dataio::load_dataset(a.data, dataio::SplitPlan{});
  TrialSet& pool = loaded.train;
  if (pool.empty()) throw DataError("no training trials to draw donors from");
  if (!pool.has_tfr()) {
    const auto plan = plan_for(cfg, loaded.manifest.fs);
    for (const auto& e : pool.eeg) pool.tfr.push_back(signal::morlet_tfr(e, plan));
  }
  std::set<int> present;
  for (const auto& e : pool.eeg) present.insert(e.label);
  std::mt19937_64 rng(a.seed);
  TrialSet made = augment::augment_batch(pool, {present.begin(), present.end()}, {segments, a.count}, rng);
  made.n_classes = pool.n_classes;
  made.class_names = pool.class_names;
  for (auto& e : made.eeg) e.fs = loaded.manifest.fs;
  for (auto& f : made.tfr) f.freqs = pool.tfr.front().freqs;
  dataio::save_dataset(a.out, made, loaded.manifest.name + "-augmented", loaded.manifest.channels,
                       std::vector<std::string>(made.size(), "train"));
  json cmd{{"name", "augment"}, {"data", a.data}, {"r", segments}, {"count", a.count}, {"seed", a.seed}};
  write_resolved(a.out, cmd, &cfg);
  out << "wrote " << made.size() << " augmented trials (R=" << segments << ") to " << a.out << '\n';
}

// ---- train ---------------------------------------------------------------

void run_train(const ConfigFlags& flags, const std::string& data, const std::string& out_dir, bool verbose,
               std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  auto loaded = dataio::load_dataset(data, cfg.split);
  check_sidecar_grid(loaded.manifest, cfg);
  train::check_geometry(cfg.model, loaded.train, "train");
  if (!loaded.test.empty()) train::check_geometry(cfg.model, loaded.test, "test");
  const auto plan = plan_for(cfg, loaded.manifest.fs);
  signal::prepare_views(loaded.train, plan);
  if (!loaded.test.empty()) signal::prepare_views(loaded.test, plan);

  write_resolved(out_dir, json{{"name", "train"}}, &cfg);
  DualTsst model(cfg.model, cfg.train.seed);
  train::TrainOptions opts;
  opts.out_dir = fs::path(out_dir);
  opts.verbose = verbose;
  const TrialSet* test = loaded.test.empty() ? nullptr : &loaded.test;
  const auto result = train::train_loop(model, loaded.train, test, cfg.train, opts);

  out << "trained " << model.trainable_count() << " parameters for " << result.log.size() << " epochs on "
      << loaded.train.size() << " trials\n";
  if (!result.log.empty()) out << "final loss " << fmt(result.log.back().loss) << '\n';
  out << "final train accuracy " << fmt(train::accuracy_on(model, loaded.train)) << '\n';
  if (test) {
    out << "final test accuracy " << fmt(train::accuracy_on(model, *test)) << '\n';
    if (result.best_test_acc) {
      out << "best test accuracy " << fmt(*result.best_test_acc) << " at epoch " << result.best_epoch << '\n';
    }
  }
  out << "outputs in " << out_dir << '\n';
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string model, data, out, subset = "test";
  bool uniform_chance = false;
};

TrialSet concat(const TrialSet& a, const TrialSet& b) {
  TrialSet s = a;
  s.eeg.insert(s.eeg.end(), b.eeg.begin(), b.eeg.end());
  s.tfr.insert(s.tfr.end(), b.tfr.begin(), b.tfr.end());
  return s;
}

void run_eval(const ConfigFlags& flags, const EvalArgs& a, std::ostream& out) {
  DualTsst model = load_checkpoint(a.model);
  RunConfig cfg;
  const fs::path sibling = fs::path(a.model).parent_path() / "resolved_config.json";
  if (flags.has_explicit_config()) {
    cfg = flags.resolve();
  } else if (fs::exists(sibling)) {
    ConfigFlags with_file = flags;
    with_file.config = sibling.string();
    cfg = with_file.resolve();
  } else {
    cfg = flags.resolve();
  }
  cfg.model = model.config();
  validate(cfg);

  auto loaded = dataio::load_dataset(a.data, cfg.split);
  check_sidecar_grid(loaded.manifest, cfg);
  TrialSet set;
  if (a.subset == "test") set = std::move(loaded.test);
  else if (a.subset == "train") set = std::move(loaded.train);
  else set = concat(loaded.train, loaded.test);
  if (set.empty()) {
    throw DataError("no trials in the '" + a.subset + "' subset; pass --subset train or --subset all");
  }
  train::check_geometry(cfg.model, set, a.subset);
  signal::prepare_views(set, plan_for(cfg, loaded.manifest.fs));

  const auto pred = train::predict(model, set);
  std::vector<int> truth;
  for (const auto& e : set.eeg) truth.push_back(e.label);
  const auto n_classes = cfg.model.n_classes;
  const auto chance = a.uniform_chance ? metrics::ChanceModel::Uniform : metrics::ChanceModel::Marginal;
  const auto cm = metrics::ConfusionMatrix::from_predictions(n_classes, truth, pred);
  std::vector<std::string> names;
  if (set.class_names.size() == n_classes) names = set.class_names;
  metrics::EvalReport report = metrics::make_report(cm, names, chance);

  std::map<int, metrics::ConfusionMatrix> per_subject;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto it = per_subject.try_emplace(set.eeg[i].subject, n_classes).first;
    it->second.add(truth[i], pred[i]);
  }
  double kappa_sum = 0.0;
  std::size_t kappa_n = 0;
  for (const auto& [subject, scm] : per_subject) {
    try {
      kappa_sum += metrics::kappa(scm, chance);
      ++kappa_n;
    } catch (const DataError&) {
    }
  }
  if (kappa_n > 0) report.kappa_mean = kappa_sum / static_cast<double>(kappa_n);
  report.config_json = run_config_to_json(cfg);
  metrics::export_report(report, a.out);

  // Pre-classifier features for external embedding tools.
  {
    NoGradGuard guard;
    const std::size_t d = cfg.model.d2;
    std::vector<double> feats;
    feats.reserve(set.size() * d);
    for (std::size_t start = 0; start < set.size(); start += 64) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(set.size(), start + 64); ++i) idx.push_back(i);
      const auto b = train::make_batch(set, idx);
      const Tensor f = model.features(b.eeg, b.tfr, false);
      feats.insert(feats.end(), f.data().begin(), f.data().end());
    }
    dataio::write_tensor(fs::path(a.out) / "features.eegt", Tensor::from({set.size(), d}, std::move(feats)));
  }
  {
    std::ostringstream csv;
    csv << "index,subject,label,predicted\n";
    for (std::size_t i = 0; i < set.size(); ++i) {
      csv << i << ',' << set.eeg[i].subject << ',' << truth[i] << ',' << pred[i] << '\n';
    }
    write_text(fs::path(a.out) / "predictions.csv", csv.str());
  }
  json cmd{{"name", "eval"}, {"model", a.model}, {"data", a.data}, {"subset", a.subset},
           {"chance", a.uniform_chance ? "uniform" : "marginal"}};
  write_resolved(a.out, cmd, &cfg);

  out << "evaluated " << set.size() << " trials\n";
  out << "accuracy " << fmt(report.accuracy) << '\n';
  out << "kappa " << fmt(report.kappa) << '\n';
  if (report.kappa_mean) out << "kappa (mean over subjects) " << fmt(*report.kappa_mean) << '\n';
}

// ---- stats ---------------------------------------------------------------

struct StatsArgs {
  std::string csv, csv_b, col_a, col_b, out;
};

std::vector<double> read_column(const std::string& path, const std::string& column) {
  std::istringstream is(read_text(path));
  std::string line;
  if (!std::getline(is, line)) throw DataError(path + " is empty");
  const auto header = split_on(line, ',');
  std::size_t col = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (trim(header[i]) == column) col = i;
  }
  if (col == header.size()) throw DataError("column '" + column + "' not found in " + path);
  std::vector<double> values;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_on(line, ',');
    if (col >= cells.size()) throw DataError(path + " row " + std::to_string(row) + " is missing a cell");
    try {
      values.push_back(parse_number(cells[col], path));
    } catch (const UsageError&) {
      throw DataError(path + " row " + std::to_string(row) + ": '" + cells[col] + "' is not a number");
    }
  }
  return values;
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

void run_stats(const StatsArgs& a, std::ostream& out) {
  const auto xa = read_column(a.csv, a.col_a);
  const auto xb = read_column(a.csv_b.empty() ? a.csv : a.csv_b, a.col_b);
  if (xa.size() != xb.size()) {
    throw DataError("columns have different lengths (" + std::to_string(xa.size()) + " vs " +
                    std::to_string(xb.size()) + ")");
  }
  if (xa.empty()) throw DataError("columns are empty");
  const auto [ma, sa] = mean_sd(xa);
  const auto [mb, sb] = mean_sd(xb);
  out << a.col_a << ": mean " << fmt(ma) << " sd " << fmt(sa) << '\n';
  out << a.col_b << ": mean " << fmt(mb) << " sd " << fmt(sb) << '\n';
  const auto w = metrics::wilcoxon_signed_rank(xa, xb);
  json res;
  res["n"] = xa.size();
  res["mean_a"] = ma;
  res["sd_a"] = sa;
  res["mean_b"] = mb;
  res["sd_b"] = sb;
  if (w) {
    out << "Wilcoxon signed-rank: n' = " << w->n_effective << ", W+ = " << w->w_plus << ", W- = " << w->w_minus
        << ", W = " << w->w << ", p = " << fmt(w->p_value, 6) << (w->exact ? " (exact)" : " (normal approximation)")
        << '\n';
    res["n_effective"] = w->n_effective;
    res["w_plus"] = w->w_plus;
    res["w_minus"] = w->w_minus;
    res["w"] = w->w;
    res["p_value"] = w->p_value;
    res["exact"] = w->exact;
  } else {
    out << "all paired differences are zero; p = 1\n";
    res["n_effective"] = 0;
    res["p_value"] = 1.0;
  }
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "stats.json", res.dump(2) + "\n");
    json cmd{{"name", "stats"}, {"csv", a.csv}, {"csv_b", a.csv_b}, {"col_a", a.col_a}, {"col_b", a.col_b}};
    write_resolved(a.out, cmd, nullptr);
  }
}

// ---- gradcheck -----------------------------------------------------------

struct GradArgs {
  std::size_t batch = 4;
  double step = 1e-6, tol = 1e-3;
  std::string out;
};

void run_gradcheck(const ConfigFlags& flags, const GradArgs& a, std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  if (a.batch == 0) throw DataError("gradcheck batch must be at least 1");
  const auto& m = cfg.model;
  std::mt19937_64 rng(cfg.train.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> eeg(a.batch * m.channels * m.samples), tfr(a.batch * m.channels * m.freqs * m.samples);
  for (auto& v : eeg) v = normal(rng);
  for (auto& v : tfr) v = normal(rng);
  std::vector<int> labels;
  for (std::size_t i = 0; i < a.batch; ++i) labels.push_back(static_cast<int>(i % m.n_classes));
  DualTsst model(m, cfg.train.seed);
  const auto r = gradcheck_model(model, Tensor::from({a.batch, m.channels, m.samples}, std::move(eeg)),
                                 Tensor::from({a.batch, m.channels, m.freqs, m.samples}, std::move(tfr)),
                                 labels, a.step);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_error);
  out << "max relative error " << buf << " over " << r.checked << " parameters (worst " << r.worst_name << "["
      << r.worst_index << "])\n";
  if (!a.out.empty()) {
    json res{{"max_rel_error", r.max_rel_error}, {"checked", r.checked}, {"worst_name", r.worst_name},
             {"worst_index", r.worst_index}, {"analytic", r.worst_analytic}, {"numeric", r.worst_numeric},
             {"tolerance", a.tol}, {"passed", r.max_rel_error < a.tol}};
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "gradcheck.json", res.dump(2) + "\n");
    write_resolved(a.out, json{{"name", "gradcheck"}, {"batch", a.batch}, {"step", a.step}, {"tol", a.tol}}, &cfg);
  }
  if (!(r.max_rel_error < a.tol)) {
    throw NumericalError("gradient check failed: " + std::string(buf) + " is not below " + fmt(a.tol, 6));
  }
  out << "gradient check passed\n";
}

}  // namespace

RunConfig preset_run_config(const std::string& name) {
  const auto p = dataio::preset(name);
  RunConfig cfg;
  cfg.preset = name;
  cfg.model = p.model;
  cfg.signal = p.signal;
  cfg.split = p.split;
  cfg.train.augment_segments = p.augment_segments;
  return cfg;
}

Ablation parse_ablation_list(const std::string& list) {
  Ablation a;
  for (const auto& raw : split_on(list, ',')) {
    std::string tok = trim(raw);
    if (tok.rfind("--", 0) == 0) tok = tok.substr(2);
    if (tok.empty()) continue;
    if (tok == "no-transformer") a.no_transformer = true;
    else if (tok == "no-branch1") a.no_branch1 = true;
    else if (tok == "no-b2-input1") a.no_b2_input1 = true;
    else if (tok == "no-b2-input2") a.no_b2_input2 = true;
    else if (tok == "no-augment") a.no_augment = true;
    else throw DataError("unknown ablation '" + tok + "'");
  }
  return a;
}

void apply_ablation(RunConfig& cfg, const Ablation& flags) {
  if (flags.no_transformer) cfg.model.use_transformer = false;
  if (flags.no_branch1) cfg.model.use_branch1 = false;
  if (flags.no_b2_input1) cfg.model.use_branch2_in1 = false;
  if (flags.no_b2_input2) cfg.model.use_branch2_in2 = false;
  if (flags.no_augment) cfg.train.augment_segments = 0;
  if (!cfg.model.use_branch1 && !cfg.model.use_branch2_in1 && !cfg.model.use_branch2_in2) {
    throw DataError("ablation leaves no input branch enabled");
  }
}

void overlay_json(RunConfig& cfg, const std::string& text) {
  const json j = parse_json(text, "config");
  if (!j.is_object()) throw DataError("config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "command") continue;
      if (k != "preset" && !v.is_object()) throw DataError("config section '" + k + "' must be an object");
      if (k == "preset") {
        cfg.preset = v.get<std::string>();
      } else if (k == "model") {
        json base = json::parse(model_config_to_json(cfg.model));
        for (auto m = v.begin(); m != v.end(); ++m) {
          if (!base.contains(m.key())) throw DataError("unknown config key 'model." + m.key() + "'");
          base[m.key()] = m.value();
        }
        cfg.model = model_config_from_json(base.dump());
      } else if (k == "train") {
        overlay_train(cfg.train, v);
      } else if (k == "signal") {
        overlay_signal(cfg.signal, v);
        const bool model_sets_freqs = j.contains("model") && j.at("model").contains("freqs");
        if (v.contains("freqs") && !model_sets_freqs) cfg.model.freqs = cfg.signal.freqs.size();
      } else if (k == "data") {
        overlay_split(cfg.split, v);
      } else {
        throw DataError("unknown config section '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

RunConfig run_config_from_json(const std::string& text, const std::string& fallback) {
  const json j = parse_json(text, "config");
  std::string name = fallback;
  if (j.is_object() && j.contains("preset")) {
    if (!j.at("preset").is_string()) throw DataError("config 'preset' must be a string");
    name = j.at("preset").get<std::string>();
  }
  RunConfig cfg = preset_run_config(name);
  overlay_json(cfg, text);
  validate(cfg);
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["preset"] = cfg.preset;
  j["model"] = json::parse(model_config_to_json(cfg.model));
  j["train"] = train_json(cfg.train);
  j["signal"] = signal_json(cfg.signal);
  j["data"] = split_json(cfg.split);
  return j.dump(2);
}

void validate(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.train.validate();
  if (!(cfg.signal.fs > 0.0)) throw DataError("signal.fs must be positive");
  if (cfg.signal.freqs.empty()) throw DataError("signal.freqs must not be empty");
  if (cfg.model.freqs != cfg.signal.freqs.size()) {
    throw DataError("model.freqs = " + std::to_string(cfg.model.freqs) + " but signal.freqs lists " +
                    std::to_string(cfg.signal.freqs.size()) + " frequencies");
  }
  for (double f : cfg.signal.freqs) {
    if (!(f > 0.0 && f < cfg.signal.fs / 2.0)) throw DataError("analysis frequency " + fmt(f, 3) + " Hz outside (0, fs/2)");
  }
  if (cfg.split.mode == dataio::SplitMode::KFold && (cfg.split.k < 2 || cfg.split.fold >= cfg.split.k)) {
    throw DataError("k-fold split needs k >= 2 and fold < k");
  }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-branch time-frequency EEG classifier pipeline", "dtsst"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic labelled EEG dataset");
  synth_cmd->add_option("--classes", synth.classes, "per-class 'freq@ch+ch' list, comma separated")
      ->capture_default_str();
  synth_cmd->add_option("--n", synth.n, "training trials per class")->capture_default_str();
  synth_cmd->add_option("--n-test", synth.n_test, "extra test-tagged trials per class")->capture_default_str();
  synth_cmd->add_option("--ch", synth.ch, "channels")->capture_default_str();
  synth_cmd->add_option("--t", synth.t, "samples per trial")->capture_default_str();
  synth_cmd->add_option("--fs", synth.fs, "sampling rate (Hz)")->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise, "white-noise standard deviation")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "output dataset directory")->required();

  ConfigFlags transform_flags;
  std::string transform_data, transform_out;
  auto* transform_cmd = app.add_subcommand("transform", "band-pass, epoch and compute Morlet TFR sidecars");
  transform_flags.add_config(transform_cmd, "bci2a");
  transform_flags.add_signal(transform_cmd);
  transform_cmd->add_option("--data", transform_data, "input dataset directory")->required();
  transform_cmd->add_option("--out", transform_out, "output dataset directory")->required();

  ConfigFlags augment_flags;
  AugmentArgs augment;
  auto* augment_cmd = app.add_subcommand("augment", "write segment-and-reassemble samples as a dataset");
  augment_flags.add_config(augment_cmd, "bci2a");
  augment_flags.add_signal(augment_cmd);
  augment_cmd->add_option("--data", augment.data, "input dataset directory")->required();
  augment_cmd->add_option("--out", augment.out, "output dataset directory")->required();
  augment.r_opt = augment_cmd->add_option("--r", augment.r, "segments per trial (default from preset)");
  augment_cmd->add_option("--count", augment.count, "samples to generate")->capture_default_str();
  augment_cmd->add_option("--seed", augment.seed, "sampling seed")->capture_default_str();

  ConfigFlags train_flags;
  std::string train_data, train_out;
  bool train_verbose = false;
  auto* train_cmd = app.add_subcommand("train", "train a model and write log.csv and checkpoints");
  train_flags.add_config(train_cmd, "bci2a");
  train_flags.add_train(train_cmd);
  train_flags.add_signal(train_cmd);
  train_flags.add_split(train_cmd);
  train_flags.add_ablation(train_cmd);
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_flag("--verbose", train_verbose, "print one line per epoch");

  ConfigFlags eval_flags;
  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint: confusion.csv, report.json, features");
  eval_flags.add_config(eval_cmd, "bci2a");
  eval_flags.add_signal(eval_cmd);
  eval_flags.add_split(eval_cmd);
  eval_cmd->add_option("--model", eval.model, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval.data, "dataset directory")->required();
  eval_cmd->add_option("--out", eval.out, "output directory")->required();
  eval_cmd->add_option("--subset", eval.subset, "test, train or all")
      ->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();
  eval_cmd->add_flag("--uniform-chance", eval.uniform_chance, "kappa chance agreement 1/M");

  StatsArgs stats;
  auto* stats_cmd = app.add_subcommand("stats", "Wilcoxon signed-rank test on two paired CSV columns");
  stats_cmd->add_option("--csv", stats.csv, "CSV file with a header row")->required()->check(CLI::ExistingFile);
  stats_cmd->add_option("--csv-b", stats.csv_b, "second CSV for column B (default: same file)")
      ->check(CLI::ExistingFile);
  stats_cmd->add_option("--col-a", stats.col_a, "first column name")->required();
  stats_cmd->add_option("--col-b", stats.col_b, "second column name")->required();
  stats_cmd->add_option("--out", stats.out, "output directory for stats.json");

  ConfigFlags grad_flags;
  GradArgs grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  grad_flags.add_config(grad_cmd, "mini");
  grad_flags.add_seed(grad_cmd);
  grad_flags.add_ablation(grad_cmd);
  grad_cmd->add_option("--batch", grad.batch, "random trials in the batch")->capture_default_str();
  grad_cmd->add_option("--step", grad.step, "central-difference step")->capture_default_str();
  grad_cmd->add_option("--tol", grad.tol, "maximum relative error")->capture_default_str();
  grad_cmd->add_option("--out", grad.out, "output directory for gradcheck.json");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kOk;
    err << app.help();
    return kUsage;
  }

  if (synth_cmd->parsed()) return guarded([&] { run_synth(synth, out); }, err);
  if (transform_cmd->parsed()) {
    return guarded([&] { run_transform(transform_flags, transform_data, transform_out, out); }, err);
  }
  if (augment_cmd->parsed()) return guarded([&] { run_augment(augment_flags, augment, out); }, err);
  if (train_cmd->parsed()) {
    return guarded([&] { run_train(train_flags, train_data, train_out, train_verbose, out); }, err);
  }
  if (eval_cmd->parsed()) return guarded([&] { run_eval(eval_flags, eval, out); }, err);
  if (stats_cmd->parsed()) return guarded([&] { run_stats(stats, out); }, err);
  if (grad_cmd->parsed()) return guarded([&] { run_gradcheck(grad_flags, grad, out); }, err);
  err << app.help();
  return kUsage;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace dtsst::cli
