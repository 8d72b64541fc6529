#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cseek/desiderata.hpp"

namespace cseek {
namespace vocab {

// Closed symbolic vocabulary. Digits map to their own value; ids are stable
// and part of the dataset file format.
enum : int {
  kDigit0 = 0,  // ... digits 0-9 occupy ids 0-9
  kX = 10,
  kY = 11,
  kPlus = 12,
  kMinus = 13,
  kTimes = 14,
  kEquals = 15,
  kSemicolon = 16,
  kQuery = 17,
  kSize = 18,
};

std::string token_str(int id);
int parse_token(const std::string& s);
std::string to_string(const std::vector<int>& ids);     // space-joined symbols
std::vector<int> tokenize(const std::string& text);
int op_token(char op);
char op_char(int token);

}  // namespace vocab

// Two-digit arithmetic problem rendered as "x = d1 d2 ; y = e1 e2 ; x op y =".
struct ArithmeticProblem {
  int x = 0;   // [10, 99]
  int y = 0;   // [10, 99]; subtraction keeps x > y
  char op = '+';

  void validate() const;
  int answer() const;
  int answer_first_digit() const;
  std::vector<int> render() const;  // 14 tokens, final token '='
};

int first_digit(int value);

// Dataset entry: a desiderata tuple plus its provenance metadata, as stored
// in the JSON-lines dataset files.
struct DatasetEntry {
  std::string kind;  // "vd" | "oi" | "recall"
  DesiderataTuple tuple;
  nlohmann::json meta;
};

// Value-Dependence tuples: alternate differs from original only in x's digits;
// target = alternate's answer digit, competing = original's. Targets cycle
// uniformly over 1..9.
std::vector<DatasetEntry> gen_vd_entries(int count, const std::vector<char>& ops,
                                         unsigned seed);
std::vector<DesiderataTuple> gen_vd_tuples(int count, const std::vector<char>& ops,
                                           unsigned seed);

// Operation-Invariance tuples: alternate shares x,y but flips the operation;
// target = original's answer digit, competing = alternate's.
std::vector<DatasetEntry> gen_oi_entries(int count,
                                         const std::vector<std::pair<char, char>>& op_pairs,
                                         unsigned seed);
std::vector<DesiderataTuple> gen_oi_tuples(int count,
                                           const std::vector<std::pair<char, char>>& op_pairs,
                                           unsigned seed);

// Recall-task tuples for the planted model: "x = d1 d2 ; y = e1 e2 ; x = ?",
// alternates differ only in d1.
std::vector<DatasetEntry> gen_recall_entries(int count, unsigned seed);
std::vector<DesiderataTuple> gen_recall_tuples(int count, unsigned seed);
std::vector<int> render_recall(int d1, int d2, int e1, int e2);

void save_dataset(const std::vector<DatasetEntry>& entries, const std::string& path);
std::vector<DatasetEntry> load_dataset(const std::string& path);
std::vector<DesiderataTuple> dataset_tuples(const std::vector<DatasetEntry>& entries);

// ---- toy model training -------------------------------------------------

struct TrainSpec {
  std::vector<char> ops{'+', '-', '*'};
  int heldout_count = 1500;
  int batch_size = 96;
  double lr = 2e-3;
  double lr_min = 2e-4;
  int warmup_steps = 100;
  int max_steps = 4000;
  int eval_every = 100;
  int eval_subset = 1000;
  double target_acc = 0.95;
  double min_acc = 0.80;
  bool verbose = true;

  nlohmann::json to_json() const;
  static TrainSpec from_json(const nlohmann::json& j);
};

struct TrainReport {
  int steps = 0;
  double final_heldout_acc = 0.0;
  // (step, train loss, held-out first-digit accuracy)
  std::vector<std::tuple<int, double, double>> curve;
};

// All valid problems for the given operations (positive answers, x > y for
// subtraction), in deterministic order.
std::vector<ArithmeticProblem> enumerate_problems(const std::vector<char>& ops);

// Next-token cross-entropy on the answer-first-digit position. Stops early at
// target_acc held-out accuracy; throws TrainingError below min_acc at budget.
// When resume is given, continues from those parameters (a run that already
// meets the target stops at step 0).
ModelParams train_toy_model(const ModelConfig& config, const TrainSpec& spec, unsigned seed,
                            TrainReport* report, const ModelParams* resume = nullptr);

// First-digit accuracy of the clean model over the given problems.
double model_accuracy(const ModelParams& params, const std::vector<ArithmeticProblem>& problems);

// ---- planted circuit ------------------------------------------------------

// Hand-built 2-layer attention-only model solving the recall task, with one
// designated value-copying head as ground truth and distractor heads carrying
// nonzero but task-irrelevant writes.
struct PlantedSpec {
  ModelParams params;
  std::vector<ComponentId> ground_truth;
  std::vector<DesiderataTuple> recall_tuples;
};

PlantedSpec build_planted_model();

// Recall accuracy over all 81 (d1, d2) pairs with digits in [1,9], optionally
// zero-ablating a set of components.
double planted_recall_accuracy(const ModelParams& params,
                               const std::vector<ComponentId>& ablated);

}  // namespace cseek
