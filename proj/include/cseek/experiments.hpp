#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cseek/tasks.hpp"

namespace cseek {

// ---- gen-data -------------------------------------------------------------

struct DataGenConfig {
  int train_count = 90;  // per desideratum
  int test_count = 90;
  unsigned seed = 0;

  nlohmann::json to_json() const;
  static DataGenConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Writes vd/oi train+test and the multiplication-transfer test suites plus a
// split manifest marking each file's role. Deterministic for a given config.
void cmd_gen_data(const DataGenConfig& config, const std::string& out_dir);

// Loads a suite by manifest name, enforcing the expected split role so
// evaluation can never consume training tuples.
std::vector<DesiderataTuple> load_suite(const std::string& data_dir, const std::string& name,
                                        const std::string& expected_role);

// ---- train-model ------------------------------------------------------------

struct TrainCmdConfig {
  ModelConfig model;
  TrainSpec train;
  unsigned seed = 0;

  nlohmann::json to_json() const;
  static TrainCmdConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Trains (or resumes) the toy model; writes checkpoint.cseek, training_curve.csv
// and train_report.json. Returns the final report.
TrainReport cmd_train_model(const TrainCmdConfig& config, const std::string& out_dir,
                            const std::optional<std::string>& resume_from = std::nullopt);

// ---- build-planted -----------------------------------------------------------

// Writes planted.cseek, ground_truth.json, selfcheck.json and recall datasets.
void cmd_build_planted(const std::string& out_dir);

// ---- discover ------------------------------------------------------------------

enum class DesiderataMode { Full, VdOnly, OiOnly };
std::string mode_str(DesiderataMode mode);
DesiderataMode mode_from_str(const std::string& s);

// Runs mask learning against the train split of data_dir; writes mask.json,
// binary_mask.json, trajectory.csv and run.json into out_dir.
DiscoveryResult cmd_discover(const ModelParams& params, const std::string& data_dir,
                             DesiderataMode mode, const DiscoveryConfig& config,
                             const std::string& out_dir);

// ---- eval ------------------------------------------------------------------------

struct EvalRow {
  std::string label;
  double vd_acc = 0.0;
  double oi_acc = 0.0;
  double vd_mul_acc = 0.0;
  double oi_plus_mul_acc = 0.0;
  int patched_count = 0;
  double vd_acc_continuous = 0.0;
  double oi_acc_continuous = 0.0;

  nlohmann::json to_json() const;
  static EvalRow from_json(const nlohmann::json& j);
};

// Evaluates a discovery run (run_dir) or, when run_dir is empty, the identity
// mask baseline. Held-out suites only; writes <label>.row.json into out_dir.
EvalRow cmd_eval(const ModelParams& params, const std::string& run_dir,
                 const std::string& data_dir, const std::string& label,
                 const std::string& out_dir);

// ---- sweep ------------------------------------------------------------------------

struct SweepArm {
  double lambda = 0.0;
  int patched_count = 0;
  double vd_acc = 0.0;
  double oi_acc = 0.0;
  double vd_mul_acc = 0.0;
  double oi_plus_mul_acc = 0.0;
};

// One discovery+eval per lambda with a shared seed; emits sweep.csv.
std::vector<SweepArm> cmd_sweep(const ModelParams& params, const std::string& data_dir,
                                const std::vector<double>& lambdas,
                                const DiscoveryConfig& base, const std::string& out_dir);

// ---- report -----------------------------------------------------------------------

// Consolidates *.row.json files under dir into report.md and results.csv.
// Returns 0, or 4 when strict and a gap or threshold violation was found.
int cmd_report(const std::string& dir, bool strict);

}  // namespace cseek
