#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include <unistd.h>

#include <json.hpp>

#include "dtsst/dataio.hpp"
#include "dtsst/errors.hpp"
#include "dtsst/signal.hpp"

using namespace dtsst;
namespace dio = dtsst::dataio;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dtsst_dataio_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// DFT magnitude at one frequency, computed directly.
double dft_mag(const std::vector<double>& x, double f, double fs) {
  std::complex<double> acc{0.0, 0.0};
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double a = -2.0 * std::numbers::pi * f * static_cast<double>(t) / fs;
    acc += x[t] * std::complex<double>(std::cos(a), std::sin(a));
  }
  return std::abs(acc);
}

dio::SynthSpec two_class_spec(double noise, std::uint64_t seed, std::size_t n) {
  dio::SynthSpec s;
  s.n_per_class = n;
  s.channels = 4;
  s.samples = 64;
  s.fs = 128.0;
  s.classes = {{10.0, {0, 1}}, {20.0, {2, 3}}};
  s.noise = noise;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Eegt, RoundTripRandomShapes) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> ext(1, 6), rank(1, 4);
  std::uniform_real_distribution<float> val(-1e3f, 1e3f);
  for (int k = 0; k < 50; ++k) {
    Shape shape(rank(rng));
    for (auto& e : shape) e = ext(rng);
    std::vector<double> v(shape_numel(shape));
    // float32-representable values survive exactly.
    for (auto& x : v) x = static_cast<double>(val(rng));
    const auto t = Tensor::from(shape, v);
    const auto back = dio::decode_tensor(dio::encode_tensor(t));
    EXPECT_EQ(back.shape(), shape);
    EXPECT_EQ(back.to_vector(), v);
  }
}

TEST(Eegt, ExactBytes) {
  const auto bytes = dio::encode_tensor(Tensor::from({1, 1, 1}, {0.5}));
  const std::string want("EEGT\x01\x00\x00\x00\x03\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00"
                         "\x00\x00\x00\x3f",
                         25);
  EXPECT_EQ(bytes, want);
}

TEST(Eegt, FileRoundTrip) {
  const auto dir = scratch_dir("file");
  const auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  dio::write_tensor(dir / "x.eegt", t);
  EXPECT_EQ(dio::read_tensor(dir / "x.eegt").to_vector(), t.to_vector());
  EXPECT_THROW(dio::read_tensor(dir / "missing.eegt"), DataError);
  fs::remove_all(dir);
}

TEST(Eegt, RejectsCorruption) {
  auto bytes = dio::encode_tensor(Tensor::from({2, 2}, {1, 2, 3, 4}));
  auto bad = bytes;
  bad.replace(0, 4, "XXXX");
  EXPECT_THROW(dio::decode_tensor(bad), DataError);
  auto ver = bytes;
  ver[4] = 2;
  EXPECT_THROW(dio::decode_tensor(ver), DataError);
  for (std::size_t cut : {0u, 3u, 7u, 10u, 20u}) {
    EXPECT_THROW(dio::decode_tensor(bytes.substr(0, cut)), DataError) << cut;
  }
  EXPECT_THROW(dio::decode_tensor(bytes.substr(0, bytes.size() - 1)), DataError);
}

TEST(KFold, FoldSizesAndDeterminism) {
  dio::SplitPlan plan;
  plan.mode = dio::SplitMode::KFold;
  plan.k = 5;
  plan.seed = 42;
  const auto m0 = dio::kfold_test_mask(10, plan);
  EXPECT_EQ(std::count(m0.begin(), m0.end(), true), 2);
  EXPECT_EQ(m0, dio::kfold_test_mask(10, plan));
  std::vector<int> hits(10, 0);
  for (std::size_t f = 0; f < 5; ++f) {
    plan.fold = f;
    const auto m = dio::kfold_test_mask(10, plan);
    for (std::size_t i = 0; i < 10; ++i) hits[i] += m[i];
  }
  // Every trial sits in exactly one test fold.
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(KFold, UnevenFoldsCoverAll) {
  dio::SplitPlan plan;
  plan.k = 4;
  plan.seed = 3;
  std::vector<int> hits(11, 0);
  std::size_t total = 0;
  for (std::size_t f = 0; f < 4; ++f) {
    plan.fold = f;
    const auto m = dio::kfold_test_mask(11, plan);
    const auto c = static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    EXPECT_TRUE(c == 2 || c == 3);
    total += c;
    for (std::size_t i = 0; i < 11; ++i) hits[i] += m[i];
  }
  EXPECT_EQ(total, 11u);
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(KFold, Errors) {
  dio::SplitPlan plan;
  plan.k = 1;
  EXPECT_THROW(dio::kfold_test_mask(10, plan), DataError);
  plan.k = 5;
  plan.fold = 5;
  EXPECT_THROW(dio::kfold_test_mask(10, plan), DataError);
  plan.fold = 0;
  EXPECT_THROW(dio::kfold_test_mask(4, plan), DataError);
}

TEST(Synth, NoiselessIsSeparableByDftOracle) {
  const auto set = dio::synth(two_class_spec(0.0, 5, 6));
  ASSERT_EQ(set.size(), 12u);
  EXPECT_EQ(set.n_classes, 2);
  for (const auto& trial : set.eeg) {
    const auto v = trial.data.to_vector();
    const double want_f = trial.label == 0 ? 10.0 : 20.0;
    for (std::size_t c = 0; c < 4; ++c) {
      std::vector<double> row(v.begin() + c * 64, v.begin() + (c + 1) * 64);
      const bool active = trial.label == 0 ? c < 2 : c >= 2;
      if (!active) {
        for (double x : row) EXPECT_EQ(x, 0.0);
        continue;
      }
      // 64 samples at 128 Hz: 2 Hz bins, so both tones are bin-centred.
      std::size_t best = 0;
      double best_mag = -1.0;
      for (std::size_t b = 0; b <= 32; ++b) {
        const double m = dft_mag(row, 2.0 * b, 128.0);
        if (m > best_mag) best_mag = m, best = b;
      }
      EXPECT_DOUBLE_EQ(2.0 * best, want_f);
      EXPECT_NEAR(best_mag, 32.0, 1e-9);
      double energy = 0.0;
      for (double x : row) energy += x * x;
      EXPECT_NEAR(energy, 32.0, 1e-9);
    }
  }
}

TEST(Synth, OrderingAndDefaults) {
  const auto set = dio::synth(two_class_spec(0.5, 1, 3));
  const std::vector<int> want{0, 0, 0, 1, 1, 1};
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(set.eeg[i].label, want[i]);
    EXPECT_EQ(set.eeg[i].fs, 128.0);
    EXPECT_EQ(set.eeg[i].data.shape(), (Shape{4, 64}));
  }
  EXPECT_TRUE(dio::synth(two_class_spec(0.5, 1, 0)).empty());
}

TEST(Synth, SeedDeterminism) {
  const auto a = dio::synth(two_class_spec(1.0, 77, 4));
  const auto b = dio::synth(two_class_spec(1.0, 77, 4));
  const auto c = dio::synth(two_class_spec(1.0, 78, 4));
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.eeg[i].data.to_vector(), b.eeg[i].data.to_vector());
    differs |= a.eeg[i].data.to_vector() != c.eeg[i].data.to_vector();
  }
  EXPECT_TRUE(differs);
}

TEST(Synth, NoiseVariance) {
  auto spec = two_class_spec(2.0, 9, 50);
  spec.classes = {{10.0, {0}}};
  const auto set = dio::synth(spec);
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (const auto& t : set.eeg) {
    const auto v = t.data.to_vector();
    for (std::size_t i = 64; i < v.size(); ++i) s += v[i], s2 += v[i] * v[i], ++n;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.1);
  EXPECT_NEAR(var, 4.0, 0.25);
}

TEST(Synth, Errors) {
  auto s = two_class_spec(0.1, 0, 2);
  s.classes[0].freq = 64.0;
  EXPECT_THROW(dio::synth(s), DataError);
  s = two_class_spec(0.1, 0, 2);
  s.classes[1].channels = {4};
  EXPECT_THROW(dio::synth(s), DataError);
  s = two_class_spec(-1.0, 0, 2);
  EXPECT_THROW(dio::synth(s), DataError);
  s = two_class_spec(0.1, 0, 2);
  s.classes.clear();
  EXPECT_THROW(dio::synth(s), DataError);
}

TEST(Presets, Geometry) {
  const auto a = dio::preset("bci2a");
  EXPECT_EQ(a.model.n_classes, 4);
  EXPECT_EQ(a.model.channels, 22u);
  EXPECT_EQ(a.model.samples, 1000u);
  EXPECT_EQ(a.augment_segments, 8u);
  EXPECT_EQ(a.signal.freqs.size(), 40u);
  EXPECT_EQ(a.split.mode, dio::SplitMode::FixedSession);
  const auto b = dio::preset("bci2b");
  EXPECT_EQ(b.model.channels, 3u);
  EXPECT_EQ(b.model.samples, 1125u);
  EXPECT_EQ(b.augment_segments, 9u);
  const auto s = dio::preset("seed");
  EXPECT_EQ(s.augment_segments, 0u);
  EXPECT_EQ(s.split.mode, dio::SplitMode::KFold);
  EXPECT_EQ(s.model.channels, 62u);
  const auto m = dio::preset("mini");
  EXPECT_EQ(m.model.freqs, m.signal.freqs.size());
  EXPECT_THROW(dio::preset("bogus"), DataError);
}

TEST(Dataset, SaveLoadRoundTripWithSidecars) {
  const auto dir = scratch_dir("roundtrip");
  auto set = dio::synth(two_class_spec(0.5, 2, 3));
  signal::prepare_views(set, signal::make_morlet_plan(signal::frequency_grid(5, 30, 5), 128.0));
  const std::vector<std::string> splits{"train", "test", "train", "test", "", "train"};
  dio::save_dataset(dir, set, "rt", {}, splits);

  dio::SplitPlan plan;
  const auto loaded = dio::load_dataset(dir, plan);
  EXPECT_EQ(loaded.manifest.name, "rt");
  EXPECT_EQ(loaded.manifest.channels.size(), 4u);
  ASSERT_TRUE(loaded.manifest.tfr.has_value());
  ASSERT_EQ(loaded.train.size(), 4u);
  ASSERT_EQ(loaded.test.size(), 2u);
  ASSERT_TRUE(loaded.train.has_tfr());
  const std::vector<std::size_t> train_idx{0, 2, 4, 5}, test_idx{1, 3};
  auto f32 = [](const std::vector<double>& v) {
    std::vector<double> o;
    for (double x : v) o.push_back(static_cast<double>(static_cast<float>(x)));
    return o;
  };
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(loaded.train.eeg[i].data.to_vector(), f32(set.eeg[train_idx[i]].data.to_vector()));
    EXPECT_EQ(loaded.train.tfr[i].data.to_vector(), f32(set.tfr[train_idx[i]].data.to_vector()));
    EXPECT_EQ(loaded.train.eeg[i].label, set.eeg[train_idx[i]].label);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(loaded.test.eeg[i].data.to_vector(), f32(set.eeg[test_idx[i]].data.to_vector()));
  }

  plan.mode = dio::SplitMode::KFold;
  plan.k = 3;
  std::set<std::vector<double>> seen;
  for (std::size_t f = 0; f < 3; ++f) {
    plan.fold = f;
    const auto kf = dio::load_dataset(dir, plan);
    EXPECT_EQ(kf.train.size() + kf.test.size(), 6u);
    EXPECT_EQ(kf.test.size(), 2u);
    for (const auto& t : kf.test.eeg) EXPECT_TRUE(seen.insert(t.data.to_vector()).second);
  }
  EXPECT_EQ(seen.size(), 6u);
  fs::remove_all(dir);
}

TEST(Dataset, LoadErrors) {
  const auto dir = scratch_dir("errors");
  const auto set = dio::synth(two_class_spec(0.5, 2, 2));
  dio::save_dataset(dir, set, "e", {});
  dio::SplitPlan plan;
  EXPECT_EQ(dio::load_dataset(dir, plan).train.size(), 4u);

  auto m = dio::read_manifest(dir);
  auto bad = m;
  bad.trials[1].label = 7;
  dio::write_manifest(dir, bad);
  EXPECT_THROW(dio::load_dataset(dir, plan), DataError);

  bad = m;
  bad.trials[2].file = "trials/nope.eegt";
  dio::write_manifest(dir, bad);
  EXPECT_THROW(dio::load_dataset(dir, plan), DataError);

  dio::write_manifest(dir, m);
  dio::write_tensor(dir / m.trials[3].file, Tensor::zeros({4, 60}));
  try {
    dio::load_dataset(dir, plan);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find(shape_str({4, 60})), std::string::npos) << e.what();
  }

  dio::write_tensor(dir / m.trials[3].file, Tensor::zeros({3, 64}));
  EXPECT_THROW(dio::load_dataset(dir, plan), ShapeError);

  bad = m;
  bad.tfr = dio::TfrInfo{{5.0, 10.0}};
  dio::write_tensor(dir / m.trials[3].file, set.eeg[3].data);
  dio::write_manifest(dir, bad);
  EXPECT_THROW(dio::load_dataset(dir, plan), DataError);

  {
    std::ofstream(dir / "manifest.json") << "{\"fs\": 128";
  }
  EXPECT_THROW(dio::load_dataset(dir, plan), DataError);
  EXPECT_THROW(dio::load_dataset(dir / "absent", plan), DataError);
  fs::remove_all(dir);
}

TEST(Manifest, DefaultsAndClassNames) {
  const auto dir = scratch_dir("manifest");
  {
    std::ofstream(dir / "manifest.json")
        << R"({"fs": 250, "channels": ["C3", "C4"], "n_classes": 3, "trials": []})";
  }
  const auto m = dio::read_manifest(dir);
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"0", "1", "2"}));
  EXPECT_FALSE(m.tfr.has_value());
  {
    std::ofstream(dir / "manifest.json") << R"({"fs": 0, "channels": [], "n_classes": 2, "trials": []})";
  }
  EXPECT_THROW(dio::read_manifest(dir), DataError);
  fs::remove_all(dir);
}
