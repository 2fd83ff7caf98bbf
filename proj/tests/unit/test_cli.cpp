#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "dtsst/dataio.hpp"
#include "dtsst/errors.hpp"

using namespace dtsst;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::dispatch(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dtsst_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Tiny mini-preset dataset shared by the end-to-end tests.
fs::path mini_dataset(const fs::path& root) {
  const auto dir = root / "data";
  const auto r = run({"synth", "--n", "6", "--n-test", "2", "--seed", "3", "--out", dir.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  return dir;
}

}  // namespace

TEST(Ablation, NoFlagsIsFullDefaultModel) {
  auto cfg = cli::preset_run_config("bci2a");
  cli::apply_ablation(cfg, {});
  EXPECT_EQ(cfg.model, ModelConfig{});
  EXPECT_TRUE(cfg.model.use_transformer && cfg.model.use_branch1 && cfg.model.use_branch2_in1 &&
              cfg.model.use_branch2_in2);
  EXPECT_EQ(cfg.train.augment_segments, 8u);
  EXPECT_EQ(cfg.train, [] {
    train::TrainConfig t;
    t.augment_segments = 8;
    return t;
  }());
}

TEST(Ablation, NoTransformerChangesOnlyThatSwitch) {
  const auto base = cli::preset_run_config("bci2a");
  auto cfg = base;
  cli::Ablation a;
  a.no_transformer = true;
  cli::apply_ablation(cfg, a);
  EXPECT_FALSE(cfg.model.use_transformer);
  cfg.model.use_transformer = true;
  EXPECT_EQ(cfg.model, base.model);
  EXPECT_EQ(cfg.train, base.train);
}

TEST(Ablation, EachFlagMaps) {
  const auto base = cli::preset_run_config("mini");
  auto c = base;
  cli::apply_ablation(c, cli::parse_ablation_list("no-branch1"));
  EXPECT_FALSE(c.model.use_branch1);
  c = base;
  cli::apply_ablation(c, cli::parse_ablation_list("--no-b2-input1, no-b2-input2"));
  EXPECT_FALSE(c.model.use_branch2_in1);
  EXPECT_FALSE(c.model.use_branch2_in2);
  EXPECT_TRUE(c.model.use_branch1);
  c = base;
  cli::apply_ablation(c, cli::parse_ablation_list("no-augment"));
  EXPECT_EQ(c.train.augment_segments, 0u);
  EXPECT_EQ(c.model, base.model);
  EXPECT_THROW(cli::parse_ablation_list("no-everything"), DataError);
}

TEST(Ablation, AllBranchesDisabledIsAnError) {
  auto cfg = cli::preset_run_config("mini");
  cli::Ablation a;
  a.no_branch1 = a.no_b2_input1 = a.no_b2_input2 = true;
  EXPECT_THROW(cli::apply_ablation(cfg, a), DataError);
  const auto r = run({"gradcheck", "--no-branch1", "--no-b2-input1", "--no-b2-input2"});
  EXPECT_EQ(r.code, cli::kDataFailure);
  EXPECT_NE(r.err.find("branch"), std::string::npos);
}

TEST(RunConfig, JsonRoundTrip) {
  for (const char* name : {"bci2a", "bci2b", "seed", "mini"}) {
    auto cfg = cli::preset_run_config(name);
    cfg.train.seed = 12345678901234ull;
    cfg.train.lr_max = 0.1 + 0.2;
    const auto text = cli::run_config_to_json(cfg);
    const auto back = cli::run_config_from_json(text);
    EXPECT_EQ(back.preset, cfg.preset);
    EXPECT_EQ(back.model, cfg.model);
    EXPECT_EQ(back.train, cfg.train);
    EXPECT_EQ(back.signal.freqs, cfg.signal.freqs);
    EXPECT_EQ(back.signal.window, cfg.signal.window);
    EXPECT_EQ(back.signal.band, cfg.signal.band);
    EXPECT_EQ(back.split.mode, cfg.split.mode);
    EXPECT_EQ(cli::run_config_to_json(back), text);
  }
}

TEST(RunConfig, OverlayAndUnknownKeys) {
  auto cfg = cli::run_config_from_json(R"({"preset": "mini", "train": {"epochs": 7}, "model": {"dropout": 0.25}})");
  EXPECT_EQ(cfg.train.epochs, 7u);
  EXPECT_EQ(cfg.model.dropout, 0.25);
  EXPECT_EQ(cfg.model.channels, 4u);

  cfg = cli::run_config_from_json(R"({"preset": "mini", "signal": {"freqs": [4, 8, 12]}})");
  EXPECT_EQ(cfg.model.freqs, 3u);

  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "model": {"dmodel": 3}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "train": {"lr": 3}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "optim": {}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "data": {"mode": "random"}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "train": {"epochs": "many"}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "nope"})"), DataError);
  EXPECT_THROW(cli::run_config_from_json("[1, 2]"), DataError);
  // Cross-field invariants are revalidated after the overlay.
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "model": {"heads": 3}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "model": {"freqs": 5}})"), DataError);
  EXPECT_THROW(cli::run_config_from_json(R"({"preset": "mini", "train": {"lr_min": 1.0}})"), DataError);
}

TEST(Dispatch, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  const auto bogus = run({"bogus"});
  EXPECT_EQ(bogus.code, cli::kUsage);
  EXPECT_NE(bogus.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({"train", "--data"}).code, cli::kUsage);
  EXPECT_EQ(run({"gradcheck", "--preset", "huge"}).code, cli::kUsage);
  EXPECT_EQ(run({"gradcheck", "--batch", "four"}).code, cli::kUsage);
  const auto help = run({"--help"});
  EXPECT_EQ(help.code, cli::kOk);
  EXPECT_NE(help.out.find("gradcheck"), std::string::npos);
  const auto root = scratch("usage");
  EXPECT_EQ(run({"synth", "--classes", "10@x", "--out", (root / "d").string()}).code, cli::kUsage);
  EXPECT_EQ(run({"synth", "--classes", "90", "--out", (root / "d").string()}).code, cli::kDataFailure);
  fs::remove_all(root);
}

TEST(Dispatch, GradcheckMiniPasses) {
  const auto r = run({"gradcheck", "--preset", "mini", "--seed", "1"});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
}

TEST(Dispatch, GradcheckFailureIsNumerical) {
  // A huge step breaks agreement, which must surface as exit code 3.
  const auto r = run({"gradcheck", "--preset", "mini", "--step", "1.0", "--tol", "1e-12"});
  EXPECT_EQ(r.code, cli::kNumericalFailure);
}

TEST(Dispatch, TrainGeometryMismatchNamesShapes) {
  const auto root = scratch("mismatch");
  const auto data = root / "data";
  ASSERT_EQ(run({"synth", "--ch", "3", "--classes", "10@0,20@2", "--n", "4", "--out", data.string()}).code, 0);
  const auto r = run({"train", "--preset", "mini", "--data", data.string(), "--out", (root / "o").string(),
                      "--epochs", "1"});
  EXPECT_EQ(r.code, cli::kDataFailure);
  EXPECT_NE(r.err.find(shape_str({3, 64})), std::string::npos) << r.err;
  EXPECT_NE(r.err.find(shape_str({4, 64})), std::string::npos) << r.err;
  fs::remove_all(root);
}

TEST(Dispatch, TrainIsDeterministicAndResolvedConfigReproduces) {
  const auto root = scratch("repro");
  const auto data = mini_dataset(root);
  const std::vector<std::string> common{"--preset", "mini", "--data", data.string(), "--epochs", "3",
                                        "--seed", "5", "--batch", "4"};
  auto args = [&](const std::string& out) {
    std::vector<std::string> a{"train"};
    a.insert(a.end(), common.begin(), common.end());
    a.push_back("--out");
    a.push_back((root / out).string());
    return a;
  };
  const auto r1 = run(args("a"));
  ASSERT_EQ(r1.code, 0) << r1.err;
  ASSERT_EQ(run(args("b")).code, 0);
  const auto log_a = slurp(root / "a" / "log.csv");
  EXPECT_FALSE(log_a.empty());
  EXPECT_EQ(log_a, slurp(root / "b" / "log.csv"));

  const auto resolved = nlohmann::json::parse(slurp(root / "a" / "resolved_config.json"));
  EXPECT_EQ(resolved["train"]["epochs"], 3);
  EXPECT_EQ(resolved["train"]["seed"], 5);
  EXPECT_EQ(resolved["train"]["batch"], 4);
  EXPECT_EQ(resolved["model"]["channels"], 4);

  const auto r3 = run({"train", "--config", (root / "a" / "resolved_config.json").string(), "--data",
                       data.string(), "--out", (root / "c").string()});
  ASSERT_EQ(r3.code, 0) << r3.err;
  EXPECT_EQ(log_a, slurp(root / "c" / "log.csv"));
  EXPECT_EQ(slurp(root / "a" / "final.dtss"), slurp(root / "c" / "final.dtss"));

  // A different seed moves the trajectory.
  auto other = args("d");
  other[std::find(other.begin(), other.end(), "--seed") - other.begin() + 1] = "6";
  ASSERT_EQ(run(other).code, 0);
  EXPECT_NE(log_a, slurp(root / "d" / "log.csv"));
  fs::remove_all(root);
}

TEST(Dispatch, EvalWritesReportAndFeatures) {
  const auto root = scratch("eval");
  const auto data = mini_dataset(root);
  ASSERT_EQ(run({"train", "--preset", "mini", "--data", data.string(), "--out", (root / "m").string(),
                 "--epochs", "1"})
                .code,
            0);
  const auto ev = root / "ev";
  const auto r = run({"eval", "--model", (root / "m" / "final.dtss").string(), "--data", data.string(), "--out",
                      ev.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"confusion.csv", "report.json", "features.eegt", "predictions.csv", "resolved_config.json"}) {
    EXPECT_TRUE(fs::exists(ev / f)) << f;
  }
  const auto feats = dataio::read_tensor(ev / "features.eegt");
  EXPECT_EQ(feats.shape(), (Shape{4, 8}));
  const auto report = nlohmann::json::parse(slurp(ev / "report.json"));
  EXPECT_EQ(report["n"], 4);
  EXPECT_TRUE(report.contains("kappa_pooled"));
  EXPECT_TRUE(report.contains("kappa_mean"));
  long total = 0;
  for (const auto& row : report["confusion"])
    for (const auto& c : row) total += c.get<long>();
  EXPECT_EQ(total, 4);

  const auto all = run({"eval", "--model", (root / "m" / "final.dtss").string(), "--data", data.string(),
                        "--out", (root / "ev_all").string(), "--subset", "all"});
  ASSERT_EQ(all.code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(root / "ev_all" / "report.json"))["n"], 16);
  fs::remove_all(root);
}

TEST(Dispatch, TransformAndAugmentProduceLoadableDatasets) {
  const auto root = scratch("transform");
  const auto data = mini_dataset(root);
  const auto tf = root / "tf";
  ASSERT_EQ(run({"transform", "--preset", "mini", "--data", data.string(), "--out", tf.string()}).code, 0);
  const auto loaded = dataio::load_dataset(tf, {});
  ASSERT_TRUE(loaded.train.has_tfr());
  EXPECT_EQ(loaded.train.size(), 12u);
  EXPECT_EQ(loaded.test.size(), 4u);
  EXPECT_EQ(loaded.train.tfr[0].data.shape(), (Shape{4, 6, 64}));

  const auto win = root / "win";
  ASSERT_EQ(run({"transform", "--preset", "mini", "--data", data.string(), "--out", win.string(), "--window",
                 "0.25,0.5", "--freq-lo", "10", "--freq-hi", "20"})
                .code,
            0);
  const auto w = dataio::load_dataset(win, {});
  EXPECT_EQ(w.train.eeg[0].data.shape(), (Shape{4, 32}));
  EXPECT_EQ(w.train.tfr[0].data.shape(), (Shape{4, 3, 32}));

  const auto aug = root / "aug";
  ASSERT_EQ(run({"augment", "--preset", "mini", "--data", tf.string(), "--out", aug.string(), "--count", "5",
                 "--r", "2"})
                .code,
            0);
  const auto a = dataio::load_dataset(aug, {});
  EXPECT_EQ(a.train.size(), 5u);
  EXPECT_TRUE(a.train.has_tfr());

  // The bci2a preset expects 250 Hz data.
  EXPECT_EQ(run({"transform", "--data", data.string(), "--out", (root / "x").string()}).code, cli::kDataFailure);
  fs::remove_all(root);
}

TEST(Dispatch, StatsComputesWilcoxon) {
  const auto root = scratch("stats");
  {
    std::ofstream(root / "acc.csv") << "subject,full,ablated\n1,0.8,0.7\n2,0.9,0.85\n3,0.6,0.66\n4,0.75,0.7\n";
    std::ofstream(root / "short.csv") << "x\n0.1\n";
  }
  const auto r = run({"stats", "--csv", (root / "acc.csv").string(), "--col-a", "full", "--col-b", "ablated",
                      "--out", (root / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(root / "o" / "stats.json"));
  // d = (0.1, 0.05, -0.06, 0.05): the lone negative difference ranks third, so
  // W- = 3; 5 of the 16 sign patterns have a rank sum <= 3, giving p = 10/16.
  EXPECT_DOUBLE_EQ(j["w_minus"].get<double>(), 3.0);
  EXPECT_DOUBLE_EQ(j["p_value"].get<double>(), 0.625);
  EXPECT_EQ(run({"stats", "--csv", (root / "acc.csv").string(), "--col-a", "full", "--col-b", "x", "--csv-b",
                 (root / "short.csv").string()})
                .code,
            cli::kDataFailure);
  EXPECT_EQ(run({"stats", "--csv", (root / "acc.csv").string(), "--col-a", "full", "--col-b", "missing"}).code,
            cli::kDataFailure);
  fs::remove_all(root);
}

TEST(Executable, ProcessExitCodes) {
  auto status = [](const std::string& args) {
    const int s = std::system((std::string(DTSST_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status("bogus"), 1);
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status("gradcheck --no-branch1 --no-b2-input1 --no-b2-input2"), 2);
}
