#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dtsst/model.hpp"
#include "dtsst/tensor.hpp"
#include "dtsst/trial.hpp"

namespace dtsst::dataio {

// Tensor file: "EEGT", u32 version (1), u8 rank, rank x u32 extents, then the
// values as little-endian float32 in row-major order.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);
std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes);

struct TrialEntry {
  std::string file;  // relative to the dataset directory
  int label = 0;
  int subject = 0;
  int session = 0;
  std::string split;  // "train", "test" or empty
};

struct TfrInfo {
  std::vector<double> freqs;
  std::string suffix = ".tfr.eegt";
  std::string n_cycles_rule = "freq/2";
};

struct DatasetManifest {
  std::string name;
  double fs = 0.0;
  std::vector<std::string> channels;
  int n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<TrialEntry> trials;
  std::optional<TfrInfo> tfr;
};

DatasetManifest read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest);

enum class SplitMode { FixedSession, KFold };

struct SplitPlan {
  SplitMode mode = SplitMode::FixedSession;
  std::size_t k = 5;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
};

// Test-fold membership for `n` trials: deterministic in (seed, k, fold).
std::vector<bool> kfold_test_mask(std::size_t n, const SplitPlan& plan);

struct LoadedDataset {
  DatasetManifest manifest;
  TrialSet train;
  TrialSet test;
};

// Reads every trial (and its TFR sidecar when the manifest declares one),
// validates shapes and labels, and partitions by the split plan.
LoadedDataset load_dataset(const std::filesystem::path& dir, const SplitPlan& plan);

// Writes trials/<i>.eegt (+ sidecars when `set` carries TFRs) and
// manifest.json. `splits` tags each trial; empty means untagged.
void save_dataset(const std::filesystem::path& dir, const TrialSet& set, const std::string& name,
                  const std::vector<std::string>& channel_names,
                  const std::vector<std::string>& splits = {});

struct SynthClass {
  double freq = 10.0;                 // Hz
  std::vector<std::size_t> channels;  // empty: every channel
};

struct SynthSpec {
  std::size_t n_per_class = 32;
  std::size_t channels = 4;
  std::size_t samples = 64;
  double fs = 128.0;
  std::vector<SynthClass> classes;
  double noise = 0.5;  // white-noise standard deviation
  std::uint64_t seed = 0;
};

// Trial = unit-amplitude sinusoid at the class frequency with a uniformly
// random phase on the class's channels, plus N(0, noise^2) white noise on all
// channels. Trials are ordered class by class.
TrialSet synth(const SynthSpec& spec);

struct SignalSettings {
  double fs = 250.0;
  std::optional<std::pair<double, double>> window;  // seconds
  std::optional<std::pair<double, double>> band;    // Hz
  std::vector<double> freqs;                         // Morlet grid
};

struct Preset {
  std::string name;
  ModelConfig model;
  SignalSettings signal;
  SplitPlan split;
  std::size_t augment_segments = 0;  // R
};

// "bci2a", "bci2b", "seed" or the desk-scale "mini".
Preset preset(const std::string& name);

}  // namespace dtsst::dataio
