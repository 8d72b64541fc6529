#include "cseek/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace cseek {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open " + path);
  f << text;
}

json read_json_file(const std::string& path, const char* what) {
  std::ifstream f(path);
  if (!f) throw ConfigError(std::string(what) + ": cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": parse error in " + path + ": " + e.what());
  }
}

std::string fmt(double v, const char* spec = "%.9g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

// ---- gen-data ----------------------------------------------------------------

json DataGenConfig::to_json() const {
  return json{{"train-count", train_count}, {"test-count", test_count}, {"seed", seed}};
}

DataGenConfig DataGenConfig::from_json(const json& j) {
  DataGenConfig c;
  if (j.contains("train-count")) c.train_count = j.at("train-count").get<int>();
  if (j.contains("test-count")) c.test_count = j.at("test-count").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<unsigned>();
  return c;
}

std::string DataGenConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

void cmd_gen_data(const DataGenConfig& config, const std::string& out_dir) {
  if (config.train_count < 9 || config.test_count < 9) {
    throw ConfigError("gen-data: counts must be >= 9 for uniform targets");
  }
  ensure_dir(out_dir);
  const unsigned s = config.seed;
  const std::vector<std::pair<char, char>> oi_pairs{{'+', '-'}, {'-', '+'}};
  const std::vector<std::pair<char, char>> oi_mul_pairs{{'+', '*'}, {'*', '+'}};

  struct FileSpec {
    const char* name;
    const char* role;
    const char* kind;
    std::vector<DatasetEntry> entries;
  };
  std::vector<FileSpec> files;
  files.push_back({"vd_train", "train", "vd", gen_vd_entries(config.train_count, {'+', '-'}, s)});
  files.push_back({"vd_test", "test", "vd", gen_vd_entries(config.test_count, {'+', '-'}, s + 1000)});
  files.push_back({"oi_train", "train", "oi", gen_oi_entries(config.train_count, oi_pairs, s + 2000)});
  files.push_back({"oi_test", "test", "oi", gen_oi_entries(config.test_count, oi_pairs, s + 3000)});
  files.push_back({"vd_mul_test", "test", "vd", gen_vd_entries(config.test_count, {'*'}, s + 4000)});
  files.push_back(
      {"oi_plus_mul_test", "test", "oi", gen_oi_entries(config.test_count, oi_mul_pairs, s + 5000)});

  json manifest;
  manifest["config-hash"] = config.hash();
  manifest["seed"] = config.seed;
  manifest["train-count"] = config.train_count;
  manifest["test-count"] = config.test_count;
  json jfiles;
  for (const FileSpec& f : files) {
    const std::string path = std::string(f.name) + ".jsonl";
    save_dataset(f.entries, out_dir + "/" + path);
    jfiles[f.name] = {{"path", path},
                      {"role", f.role},
                      {"kind", f.kind},
                      {"count", f.entries.size()}};
  }
  manifest["files"] = jfiles;
  write_text(out_dir + "/manifest.json", manifest.dump(2) + "\n");
}

std::vector<DesiderataTuple> load_suite(const std::string& data_dir, const std::string& name,
                                        const std::string& expected_role) {
  const json manifest = read_json_file(data_dir + "/manifest.json", "load_suite");
  const auto& files = manifest.at("files");
  if (!files.contains(name)) {
    throw ConfigError("load_suite: dataset '" + name + "' not listed in " + data_dir +
                      "/manifest.json");
  }
  const auto& entry = files.at(name);
  const std::string role = entry.at("role").get<std::string>();
  if (role != expected_role) {
    throw ConfigError("load_suite: dataset '" + name + "' has role '" + role +
                      "' but this stage requires '" + expected_role +
                      "' (train/test splits must not mix)");
  }
  return dataset_tuples(load_dataset(data_dir + "/" + entry.at("path").get<std::string>()));
}

// ---- train-model --------------------------------------------------------------

json TrainCmdConfig::to_json() const {
  return json{{"model", model.to_json()}, {"train", train.to_json()}, {"seed", seed}};
}

TrainCmdConfig TrainCmdConfig::from_json(const json& j) {
  TrainCmdConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainSpec::from_json(j.at("train"));
  if (j.contains("seed")) c.seed = j.at("seed").get<unsigned>();
  return c;
}

std::string TrainCmdConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

TrainReport cmd_train_model(const TrainCmdConfig& config, const std::string& out_dir,
                            const std::optional<std::string>& resume_from) {
  ensure_dir(out_dir);
  TrainReport report;
  ModelParams params = [&] {
    if (resume_from) {
      const ModelParams init = load_checkpoint(*resume_from, config.model);
      return train_toy_model(config.model, config.train, config.seed, &report, &init);
    }
    return train_toy_model(config.model, config.train, config.seed, &report, nullptr);
  }();

  save_checkpoint(params, out_dir + "/checkpoint.cseek");

  std::ostringstream csv;
  csv << "# config-hash " << config.hash() << " seed " << config.seed << "\n";
  csv << "step,loss,heldout_acc\n";
  for (const auto& [step, loss, acc] : report.curve) {
    csv << step << "," << fmt(loss) << "," << fmt(acc) << "\n";
  }
  write_text(out_dir + "/training_curve.csv", csv.str());

  json jrep;
  jrep["config-hash"] = config.hash();
  jrep["seed"] = config.seed;
  jrep["steps"] = report.steps;
  jrep["final-heldout-acc"] = report.final_heldout_acc;
  jrep["reached-target"] = report.final_heldout_acc >= config.train.target_acc;
  write_text(out_dir + "/train_report.json", jrep.dump(2) + "\n");
  return report;
}

// ---- build-planted ---------------------------------------------------------------

void cmd_build_planted(const std::string& out_dir) {
  ensure_dir(out_dir);
  const PlantedSpec spec = build_planted_model();
  save_checkpoint(spec.params, out_dir + "/planted.cseek");

  json gt;
  gt["config-hash"] = spec.params.config.hash();
  json comps = json::array();
  for (const ComponentId& c : spec.ground_truth) {
    json e;
    e["layer"] = c.layer;
    if (c.kind == ComponentKind::Mlp) {
      e["kind"] = "mlp";
    } else {
      e["kind"] = "attention-head";
      e["head"] = c.head;
    }
    comps.push_back(e);
  }
  gt["components"] = comps;
  write_text(out_dir + "/ground_truth.json", gt.dump(2) + "\n");

  json check;
  check["config-hash"] = spec.params.config.hash();
  check["clean-accuracy"] = planted_recall_accuracy(spec.params, {});
  check["designated-ablated-accuracy"] =
      planted_recall_accuracy(spec.params, spec.ground_truth);
  bool distractors_ok = true;
  for (const ComponentId& c : enumerate_components(spec.params.config)) {
    if (c == spec.ground_truth[0]) continue;
    if (planted_recall_accuracy(spec.params, {c}) < 1.0) distractors_ok = false;
  }
  check["distractor-ablations-unchanged"] = distractors_ok;
  check["all-pass"] = check["clean-accuracy"].get<double>() == 1.0 &&
                      check["designated-ablated-accuracy"].get<double>() <= 0.2 &&
                      distractors_ok;
  write_text(out_dir + "/selfcheck.json", check.dump(2) + "\n");

  // recall tuples double as a VD-style suite so discover/eval run unchanged
  const auto train_entries = gen_recall_entries(90, 2);
  const auto test_entries = gen_recall_entries(90, 3);
  save_dataset(train_entries, out_dir + "/recall_train.jsonl");
  save_dataset(test_entries, out_dir + "/recall_test.jsonl");
  json manifest;
  manifest["config-hash"] = spec.params.config.hash();
  manifest["seed"] = 2;
  manifest["files"] = {
      {"vd_train",
       {{"path", "recall_train.jsonl"}, {"role", "train"}, {"kind", "recall"}, {"count", 90}}},
      {"vd_test",
       {{"path", "recall_test.jsonl"}, {"role", "test"}, {"kind", "recall"}, {"count", 90}}}};
  write_text(out_dir + "/manifest.json", manifest.dump(2) + "\n");
}

// ---- discover -------------------------------------------------------------------

std::string mode_str(DesiderataMode mode) {
  switch (mode) {
    case DesiderataMode::Full: return "full";
    case DesiderataMode::VdOnly: return "vd-only";
    default: return "oi-only";
  }
}

DesiderataMode mode_from_str(const std::string& s) {
  if (s == "full") return DesiderataMode::Full;
  if (s == "vd-only") return DesiderataMode::VdOnly;
  if (s == "oi-only") return DesiderataMode::OiOnly;
  throw ConfigError("discover: unknown desiderata mode '" + s + "'");
}

DiscoveryResult cmd_discover(const ModelParams& params, const std::string& data_dir,
                             DesiderataMode mode, const DiscoveryConfig& config,
                             const std::string& out_dir) {
  ensure_dir(out_dir);
  std::vector<Desideratum> desiderata;
  if (mode != DesiderataMode::OiOnly) {
    desiderata.push_back(
        {"vd", Direction::ChangeToAlternate, load_suite(data_dir, "vd_train", "train")});
  }
  if (mode != DesiderataMode::VdOnly) {
    desiderata.push_back(
        {"oi", Direction::PreserveOriginal, load_suite(data_dir, "oi_train", "train")});
  }

  DiscoveryResult result = optimize(params, desiderata, config);

  const std::string model_hash = params.config.hash();
  save_mask(result.mask, model_hash, config.round_threshold, out_dir + "/mask.json");
  save_binary_mask(result.binary, params.config, model_hash, config.round_threshold,
                   out_dir + "/binary_mask.json");

  std::vector<std::string> names;
  for (const Desideratum& d : desiderata) names.push_back(d.name);
  if (config.sum_objective) names = {"combined"};
  write_trajectory_csv(result.trajectory, names, out_dir + "/trajectory.csv",
                       "config-hash " + config.hash() + " seed " + std::to_string(config.seed));

  json run;
  run["model-config-hash"] = model_hash;
  run["discovery-config"] = config.to_json();
  run["discovery-config-hash"] = config.hash();
  run["seed"] = config.seed;
  run["lambda"] = config.lambda;
  run["desiderata"] = mode_str(mode);
  run["patched-count"] = static_cast<int>(result.binary.patched.size());
  json patched = json::array();
  for (const ComponentId& c : result.binary.patched) patched.push_back(c.str());
  run["patched"] = patched;
  write_text(out_dir + "/run.json", run.dump(2) + "\n");
  return result;
}

// ---- eval -----------------------------------------------------------------------

json EvalRow::to_json() const {
  auto acc = [](double v) { return v < 0.0 ? json() : json(v); };
  json j;
  j["label"] = label;
  j["vd-acc"] = acc(vd_acc);
  j["oi-acc"] = acc(oi_acc);
  j["vd-mul-acc"] = acc(vd_mul_acc);
  j["oi-plus-mul-acc"] = acc(oi_plus_mul_acc);
  j["patched-count"] = patched_count;
  j["vd-acc-continuous"] = acc(vd_acc_continuous);
  j["oi-acc-continuous"] = acc(oi_acc_continuous);
  return j;
}

EvalRow EvalRow::from_json(const json& j) {
  auto acc = [&](const char* key) {
    return (!j.contains(key) || j.at(key).is_null()) ? -1.0 : j.at(key).get<double>();
  };
  EvalRow r;
  r.label = j.at("label").get<std::string>();
  r.vd_acc = acc("vd-acc");
  r.oi_acc = acc("oi-acc");
  r.vd_mul_acc = acc("vd-mul-acc");
  r.oi_plus_mul_acc = acc("oi-plus-mul-acc");
  r.patched_count = j.at("patched-count").get<int>();
  r.vd_acc_continuous = acc("vd-acc-continuous");
  r.oi_acc_continuous = acc("oi-acc-continuous");
  return r;
}

EvalRow cmd_eval(const ModelParams& params, const std::string& run_dir,
                 const std::string& data_dir, const std::string& label,
                 const std::string& out_dir) {
  ensure_dir(out_dir);
  const json manifest = read_json_file(data_dir + "/manifest.json", "eval");
  auto maybe_suite = [&](const std::string& name) -> std::optional<std::vector<DesiderataTuple>> {
    if (!manifest.at("files").contains(name)) return std::nullopt;
    return load_suite(data_dir, name, "test");
  };

  BinaryMask binary;
  Mask mask = Mask::ones(params.config);
  json run;
  if (!run_dir.empty()) {
    std::string mask_hash, bin_hash;
    mask = load_mask(run_dir + "/mask.json", params.config, &mask_hash);
    binary = load_binary_mask(run_dir + "/binary_mask.json", params.config, &bin_hash);
    const std::string expect = params.config.hash();
    if (mask_hash != expect || bin_hash != expect) {
      throw ConfigError("eval: mask config-hash does not match the checkpoint's config");
    }
    run = read_json_file(run_dir + "/run.json", "eval");
  }

  EvalRow row;
  row.label = label;
  row.patched_count = static_cast<int>(binary.patched.size());
  row.vd_acc = row.oi_acc = row.vd_mul_acc = row.oi_plus_mul_acc = -1.0;
  row.vd_acc_continuous = row.oi_acc_continuous = -1.0;

  if (auto suite = maybe_suite("vd_test")) {
    row.vd_acc = evaluate_accuracy(params, binary, *suite);
    row.vd_acc_continuous = run_dir.empty()
                                ? row.vd_acc
                                : evaluate_accuracy_continuous(params, mask, *suite);
  }
  if (auto suite = maybe_suite("oi_test")) {
    row.oi_acc = evaluate_accuracy(params, binary, *suite);
    row.oi_acc_continuous = run_dir.empty()
                                ? row.oi_acc
                                : evaluate_accuracy_continuous(params, mask, *suite);
  }
  if (auto suite = maybe_suite("vd_mul_test")) {
    row.vd_mul_acc = evaluate_accuracy(params, binary, *suite);
  }
  if (auto suite = maybe_suite("oi_plus_mul_test")) {
    row.oi_plus_mul_acc = evaluate_accuracy(params, binary, *suite);
  }

  json j = row.to_json();
  j["config-hash"] = params.config.hash();
  j["total-components"] = static_cast<int>(enumerate_components(params.config).size());
  if (!run.is_null()) {
    j["lambda"] = run.value("lambda", 0.0);
    j["seed"] = run.value("seed", 0u);
    j["desiderata"] = run.value("desiderata", "");
  } else {
    j["seed"] = manifest.value("seed", 0u);
  }
  write_text(out_dir + "/" + label + ".row.json", j.dump(2) + "\n");
  return row;
}

// ---- sweep -----------------------------------------------------------------------

std::vector<SweepArm> cmd_sweep(const ModelParams& params, const std::string& data_dir,
                                const std::vector<double>& lambdas,
                                const DiscoveryConfig& base, const std::string& out_dir) {
  if (lambdas.size() < 2) throw ConfigError("sweep: need at least 2 lambda values");
  ensure_dir(out_dir);
  std::vector<SweepArm> arms;
  for (double lam : lambdas) {
    DiscoveryConfig cfg = base;
    cfg.lambda = lam;
    const std::string arm_dir = out_dir + "/lambda_" + fmt(lam, "%.6g");
    DiscoveryResult result = cmd_discover(params, data_dir, DesiderataMode::Full, cfg, arm_dir);
    EvalRow row = cmd_eval(params, arm_dir, data_dir, "lambda_" + fmt(lam, "%.6g"), arm_dir);
    SweepArm arm;
    arm.lambda = lam;
    arm.patched_count = static_cast<int>(result.binary.patched.size());
    arm.vd_acc = row.vd_acc;
    arm.oi_acc = row.oi_acc;
    arm.vd_mul_acc = row.vd_mul_acc;
    arm.oi_plus_mul_acc = row.oi_plus_mul_acc;
    arms.push_back(arm);
  }
  std::ostringstream csv;
  csv << "# config-hash " << base.hash() << " seed " << base.seed << "\n";
  csv << "lambda,patched_count,vd_acc,oi_acc,vd_mul_acc,oi_plus_mul_acc\n";
  for (const SweepArm& a : arms) {
    csv << fmt(a.lambda) << "," << a.patched_count << "," << fmt(a.vd_acc) << ","
        << fmt(a.oi_acc) << "," << fmt(a.vd_mul_acc) << "," << fmt(a.oi_plus_mul_acc) << "\n";
  }
  write_text(out_dir + "/sweep.csv", csv.str());
  return arms;
}

// ---- report -----------------------------------------------------------------------

namespace {

struct FoundRow {
  EvalRow row;
  json raw;
};

std::string cell(double v) {
  if (v < 0.0) return "—";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", v * 100.0);
  return buf;
}

std::string csv_cell(double v) { return v < 0.0 ? "" : fmt(v); }

}  // namespace

int cmd_report(const std::string& dir, bool strict) {
  std::vector<FoundRow> rows;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > 9 && name.substr(name.size() - 9) == ".row.json") {
      const json j = read_json_file(entry.path().string(), "report");
      rows.push_back({EvalRow::from_json(j), j});
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const FoundRow& a, const FoundRow& b) { return a.row.label < b.row.label; });

  const std::vector<std::string> expected{"full", "original-model", "vd-only"};
  std::vector<std::string> missing;
  for (const std::string& want : expected) {
    bool found = false;
    for (const FoundRow& r : rows) found = found || r.row.label == want;
    if (!found) missing.push_back(want);
  }

  std::ostringstream md, csv;
  md << "# Patching results\n\n";
  if (!rows.empty()) {
    md << "Model config " << rows.front().raw.value("config-hash", std::string("unknown"))
       << ", seed " << rows.front().raw.value("seed", 0u) << ".\n\n";
    csv << "# config-hash " << rows.front().raw.value("config-hash", std::string("unknown"))
        << " seed " << rows.front().raw.value("seed", 0u) << "\n";
  }
  md << "| run | VD acc (+,-) | OI acc (+,-) | VD acc (*) | OI acc (+,*) | # patched |\n";
  md << "|---|---|---|---|---|---|\n";
  csv << "label,vd_acc,oi_acc,vd_mul_acc,oi_plus_mul_acc,patched_count\n";
  for (const FoundRow& r : rows) {
    md << "| " << r.row.label << " | " << cell(r.row.vd_acc) << " | " << cell(r.row.oi_acc)
       << " | " << cell(r.row.vd_mul_acc) << " | " << cell(r.row.oi_plus_mul_acc) << " | "
       << r.row.patched_count << " |\n";
    csv << r.row.label << "," << csv_cell(r.row.vd_acc) << "," << csv_cell(r.row.oi_acc) << ","
        << csv_cell(r.row.vd_mul_acc) << "," << csv_cell(r.row.oi_plus_mul_acc) << ","
        << r.row.patched_count << "\n";
  }
  for (const std::string& gap : missing) {
    md << "| " << gap << " | — | — | — | — | — |\n";
    csv << gap << ",,,,,\n";
  }

  const EvalRow* full = nullptr;
  const EvalRow* vd_only = nullptr;
  for (const FoundRow& r : rows) {
    if (r.row.label == "full") full = &r.row;
    if (r.row.label == "vd-only") vd_only = &r.row;
  }
  md << "\n";
  if (full && vd_only && full->oi_acc >= 0.0 && vd_only->oi_acc >= 0.0) {
    const double gap = full->oi_acc - vd_only->oi_acc;
    md << "OI comparison: full " << cell(full->oi_acc) << " vs vd-only "
       << cell(vd_only->oi_acc) << " (gap " << fmt(gap * 100.0, "%.1f") << " pp).\n";
    if (gap < 0.20) {
      md << "Note: this gap is below the 20 pp collapse observed in the full-scale "
            "reference experiments; the toy model diverges from the reference here.\n";
    } else {
      md << "Dropping the OI desideratum costs " << fmt(gap * 100.0, "%.1f")
         << " pp of OI accuracy, matching the full-scale reference pattern.\n";
    }
  }
  if (!missing.empty()) {
    md << "\nMissing runs:";
    for (const std::string& gap : missing) md << " " << gap;
    md << "\n";
  }

  write_text(dir + "/report.md", md.str());
  write_text(dir + "/results.csv", csv.str());

  if (strict) {
    if (!missing.empty()) return 4;
    if (full) {
      int total = 0;
      for (const FoundRow& r : rows) {
        if (r.row.label == "full") total = r.raw.value("total-components", 0);
      }
      const bool ok = full->vd_acc >= 0.80 && full->oi_acc >= 0.80 && total > 0 &&
                      full->patched_count <= static_cast<int>(0.15 * total + 1e-9);
      if (!ok) return 4;
    }
  }
  return 0;
}

}  // namespace cseek
