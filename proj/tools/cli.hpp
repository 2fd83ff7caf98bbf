#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dtsst/dataio.hpp"
#include "dtsst/model.hpp"
#include "dtsst/train.hpp"

namespace dtsst::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataFailure = 2, kNumericalFailure = 3 };

// Everything a run needs besides file paths. Serialized as resolved_config.json
// with the sections "preset", "model", "train", "signal" and "data".
struct RunConfig {
  std::string preset = "bci2a";
  ModelConfig model;
  train::TrainConfig train;
  dataio::SignalSettings signal;
  dataio::SplitPlan split;
};

struct Ablation {
  bool no_transformer = false;
  bool no_branch1 = false;
  bool no_b2_input1 = false;
  bool no_b2_input2 = false;
  bool no_augment = false;
};

// Preset geometry and signal settings with the default optimizer recipe; the
// augmentation segment count comes from the preset.
RunConfig preset_run_config(const std::string& name);

// Parses "no-transformer,no-augment"-style lists; DataError on unknown names.
Ablation parse_ablation_list(const std::string& list);

// Switches components off. DataError when no input branch is left.
void apply_ablation(RunConfig& cfg, const Ablation& flags);

// Overlays the sections present in `text` onto `cfg`. Unknown keys are
// rejected; a top-level "command" object is informational and ignored.
void overlay_json(RunConfig& cfg, const std::string& text);

// Preset named in the file (or `fallback`), then the file's sections on top.
RunConfig run_config_from_json(const std::string& text, const std::string& fallback = "bci2a");

std::string run_config_to_json(const RunConfig& cfg);

// Cross-field checks: model and train invariants plus F == number of
// analysis frequencies.
void validate(const RunConfig& cfg);

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace dtsst::cli
