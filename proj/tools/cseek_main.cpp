#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cseek/experiments.hpp"

namespace {

using namespace cseek;
using nlohmann::json;

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

std::vector<double> parse_lambdas(const std::string& csv) {
  std::vector<double> out;
  std::string cur;
  for (char c : csv + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cseek: learns sparse patch masks over transformer components from desiderata"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir, data_dir, checkpoint, run_dir, label = "run";
  std::string desiderata = "full", lambdas_csv = "0.003,0.01,0.03,0.1,0.3,1.0";
  std::string resume_path, report_dir;
  unsigned seed = 0;
  bool strict = false, identity = false;
  double lambda_flag = -1.0;
  int rounds_flag = -1, max_steps_flag = -1;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "random seed");
  app.add_flag("--strict", strict, "fail on gaps or unmet thresholds");

  auto* gen = app.add_subcommand("gen-data", "generate desiderata datasets");
  int train_count = -1, test_count = -1;
  gen->add_option("--train-count", train_count, "tuples per training desideratum");
  gen->add_option("--test-count", test_count, "tuples per held-out suite");

  auto* train = app.add_subcommand("train-model", "train the toy arithmetic model");
  train->add_option("--resume", resume_path, "checkpoint to continue from");
  train->add_option("--max-steps", max_steps_flag, "training step budget");

  auto* planted = app.add_subcommand("build-planted", "build the planted-circuit model");

  auto* discover = app.add_subcommand("discover", "learn a patch mask");
  discover->add_option("--checkpoint", checkpoint, "model checkpoint");
  discover->add_option("--data", data_dir, "dataset directory");
  discover->add_option("--desiderata", desiderata, "full | vd-only | oi-only");
  discover->add_option("--lambda", lambda_flag, "sparsity regularization weight");
  discover->add_option("--rounds", rounds_flag, "optimization rounds");

  auto* eval = app.add_subcommand("eval", "evaluate a mask on held-out suites");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint");
  eval->add_option("--data", data_dir, "dataset directory");
  eval->add_option("--run", run_dir, "discovery run directory (mask.json etc.)");
  eval->add_flag("--identity", identity, "evaluate the identity (no-patch) mask");
  eval->add_option("--label", label, "row label");

  auto* sweep = app.add_subcommand("sweep", "discovery + eval across lambda values");
  sweep->add_option("--checkpoint", checkpoint, "model checkpoint");
  sweep->add_option("--data", data_dir, "dataset directory");
  sweep->add_option("--lambdas", lambdas_csv, "comma-separated lambda list");
  sweep->add_option("--rounds", rounds_flag, "optimization rounds per arm");

  auto* report = app.add_subcommand("report", "consolidate eval rows into a table");
  report->add_option("--dir", report_dir, "directory holding *.row.json files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const json cfg = load_config_file(config_path);

    if (gen->parsed()) {
      if (out_dir.empty()) throw ConfigError("gen-data: --out is required");
      DataGenConfig c = DataGenConfig::from_json(cfg);
      if (app.count("--seed")) c.seed = seed;
      if (train_count > 0) c.train_count = train_count;
      if (test_count > 0) c.test_count = test_count;
      cmd_gen_data(c, out_dir);
      std::cout << "wrote datasets to " << out_dir << " (config-hash " << c.hash() << ")\n";
      return 0;
    }

    if (train->parsed()) {
      if (out_dir.empty()) throw ConfigError("train-model: --out is required");
      TrainCmdConfig c = TrainCmdConfig::from_json(cfg);
      if (app.count("--seed")) c.seed = seed;
      if (max_steps_flag > 0) c.train.max_steps = max_steps_flag;
      std::optional<std::string> resume;
      if (!resume_path.empty()) resume = resume_path;
      const TrainReport rep = cmd_train_model(c, out_dir, resume);
      std::cout << "trained " << rep.steps << " steps, held-out first-digit accuracy "
                << rep.final_heldout_acc << "\n";
      if (rep.final_heldout_acc < c.train.target_acc) {
        std::cerr << "target accuracy " << c.train.target_acc
                  << " not reached; curve written to " << out_dir << "/training_curve.csv\n";
        return 1;
      }
      return 0;
    }

    if (planted->parsed()) {
      if (out_dir.empty()) throw ConfigError("build-planted: --out is required");
      cmd_build_planted(out_dir);
      std::cout << "planted model, ground truth and recall datasets written to " << out_dir
                << "\n";
      return 0;
    }

    if (discover->parsed()) {
      if (checkpoint.empty() || data_dir.empty() || out_dir.empty()) {
        throw ConfigError("discover: --checkpoint, --data and --out are required");
      }
      const ModelParams params = load_checkpoint(checkpoint);
      DiscoveryConfig c = cfg.is_object() && !cfg.empty() ? DiscoveryConfig::from_json(cfg)
                                                          : DiscoveryConfig{};
      if (app.count("--seed")) c.seed = seed;
      if (lambda_flag >= 0.0) c.lambda = lambda_flag;
      if (rounds_flag > 0) c.total_rounds = rounds_flag;
      const DiscoveryResult result =
          cmd_discover(params, data_dir, mode_from_str(desiderata), c, out_dir);
      std::cout << "discovery patched " << result.binary.patched.size() << " of "
                << result.mask.components.size() << " components; artifacts in " << out_dir
                << "\n";
      return 0;
    }

    if (eval->parsed()) {
      if (checkpoint.empty() || data_dir.empty() || out_dir.empty()) {
        throw ConfigError("eval: --checkpoint, --data and --out are required");
      }
      if (identity) run_dir.clear();
      if (!identity && run_dir.empty()) {
        throw ConfigError("eval: give --run <dir> or --identity");
      }
      const ModelParams params = load_checkpoint(checkpoint);
      const EvalRow row = cmd_eval(params, run_dir, data_dir, label, out_dir);
      std::cout << "eval " << row.label << ": vd=" << row.vd_acc << " oi=" << row.oi_acc
                << " vd_mul=" << row.vd_mul_acc << " oi_plus_mul=" << row.oi_plus_mul_acc
                << " patched=" << row.patched_count << "\n";
      return 0;
    }

    if (sweep->parsed()) {
      if (checkpoint.empty() || data_dir.empty() || out_dir.empty()) {
        throw ConfigError("sweep: --checkpoint, --data and --out are required");
      }
      const ModelParams params = load_checkpoint(checkpoint);
      DiscoveryConfig base = cfg.is_object() && !cfg.empty() ? DiscoveryConfig::from_json(cfg)
                                                             : DiscoveryConfig{};
      if (app.count("--seed")) base.seed = seed;
      if (rounds_flag > 0) base.total_rounds = rounds_flag;
      const auto arms = cmd_sweep(params, data_dir, parse_lambdas(lambdas_csv), base, out_dir);
      std::cout << "sweep over " << arms.size() << " lambda values written to " << out_dir
                << "/sweep.csv\n";
      return 0;
    }

    if (report->parsed()) {
      if (report_dir.empty()) report_dir = out_dir;
      if (report_dir.empty()) throw ConfigError("report: --dir is required");
      const int code = cmd_report(report_dir, strict);
      std::cout << "report written to " << report_dir << "/report.md\n";
      return code;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
