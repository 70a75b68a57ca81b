#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcaf/arch_config.hpp"
#include "tcaf/dataset.hpp"
#include "tcaf/eval.hpp"
#include "tcaf/train.hpp"

namespace tcaf::cli {

/// Everything one command needs. Without a dataset path the bundle is
/// generated from `synth`.
struct RunConfig {
  ArchConfig arch;
  TrainConfig train;
  SynthConfig synth;
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> out;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Sections "arch", "train", "synth", "paths"; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
nlohmann::json to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

/// The bundle named by `config.dataset`, or a synthetic one.
DatasetBundle resolve_bundle(const RunConfig& config);

/// One ablation cell trained with the stage-1 budget: stage 1 picks the best
/// epoch and gamma on the validation splits, then the best model is scored on
/// the test splits with stage-1 seen classes plus the unseen test classes as
/// candidates. With `full_protocol` the two-stage protocol runs instead.
struct CellResult {
  EvalReport report;
  TcafModel<float> model;
  std::vector<int> seen_classes;
};
CellResult run_ablation_cell(const DatasetBundle& bundle, const ArchConfig& arch, const TrainConfig& train,
                             bool full_protocol);

/// Test-split reports with audio noise at each fraction, gamma fixed.
std::vector<EvalReport> noise_sweep(TcafModel<float>& model, const DatasetBundle& bundle,
                                    std::span<const int> seen_classes, double gamma,
                                    std::span<const double> fractions, const EvalOptions& base);

const std::vector<double>& noise_fractions();

struct AblationRow {
  std::string axis;
  std::string cell;
  EvalReport report;
};

/// One row per line: axis, cell, S, U, HM, ZSL, gamma.
std::string format_ablation_table(const std::vector<AblationRow>& rows);
std::string format_ablation_tsv(const std::vector<AblationRow>& rows);

/// Parses and runs one command. Returns 0 on success, 1 on a library error
/// (printed as "error [category]: message"), 2 on a usage error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Name of the environment variable holding the default output directory.
inline constexpr const char* kRunDirEnv = "TCAF_RUN_DIR";

}  // namespace tcaf::cli
