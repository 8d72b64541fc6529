#include "cseek/tasks.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace cseek {

using nlohmann::json;

// ---- vocab ----------------------------------------------------------------

namespace vocab {

static const char* kSymbols[kSize] = {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
                                      "x", "y", "+", "-", "*", "=", ";", "?"};

std::string token_str(int id) {
  if (id < 0 || id >= kSize) throw IndexError("vocab: token id " + std::to_string(id));
  return kSymbols[id];
}

int parse_token(const std::string& s) {
  for (int i = 0; i < kSize; ++i) {
    if (s == kSymbols[i]) return i;
  }
  throw IndexError("vocab: unknown symbol '" + s + "'");
}

std::string to_string(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token_str(ids[i]);
  }
  return out;
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) ids.push_back(parse_token(tok));
  return ids;
}

int op_token(char op) {
  switch (op) {
    case '+': return kPlus;
    case '-': return kMinus;
    case '*': return kTimes;
    default: throw IndexError(std::string("vocab: unknown operator '") + op + "'");
  }
}

char op_char(int token) {
  switch (token) {
    case kPlus: return '+';
    case kMinus: return '-';
    case kTimes: return '*';
    default: throw IndexError("vocab: token " + std::to_string(token) + " is not an operator");
  }
}

}  // namespace vocab

// ---- arithmetic problems -----------------------------------------------------

int first_digit(int value) {
  if (value <= 0) throw ContractError("first_digit: value must be positive");
  while (value >= 10) value /= 10;
  return value;
}

void ArithmeticProblem::validate() const {
  if (x < 10 || x > 99 || y < 10 || y > 99) {
    throw ContractError("problem: operands must be two-digit values");
  }
  if (op != '+' && op != '-' && op != '*') {
    throw ContractError(std::string("problem: unknown operator '") + op + "'");
  }
  if (op == '-' && x <= y) {
    throw ContractError("problem: subtraction requires x > y");
  }
}

int ArithmeticProblem::answer() const {
  validate();
  switch (op) {
    case '+': return x + y;
    case '-': return x - y;
    default: return x * y;
  }
}

int ArithmeticProblem::answer_first_digit() const { return first_digit(answer()); }

std::vector<int> ArithmeticProblem::render() const {
  validate();
  using namespace vocab;
  return {kX,    kEquals, x / 10, x % 10, kSemicolon, kY,      kEquals,
          y / 10, y % 10, kSemicolon, kX, op_token(op), kY,    kEquals};
}

std::vector<int> render_recall(int d1, int d2, int e1, int e2) {
  using namespace vocab;
  if (d1 < 1 || d1 > 9 || d2 < 0 || d2 > 9 || e1 < 1 || e1 > 9 || e2 < 0 || e2 > 9) {
    throw ContractError("render_recall: digits out of range");
  }
  return {kX, kEquals, d1, d2, kSemicolon, kY, kEquals, e1, e2, kSemicolon, kX, kEquals,
          kQuery};
}

// ---- generators ----------------------------------------------------------------

namespace {

constexpr int kMaxAttempts = 20000;

void check_ops(const std::vector<char>& ops) {
  if (ops.empty()) throw GenerationError("generator: no operations given");
  for (char op : ops) {
    if (op != '+' && op != '-' && op != '*') {
      throw GenerationError(std::string("generator: unknown operation '") + op + "'");
    }
  }
}

void check_count(int count) {
  if (count < 9) {
    throw GenerationError("generator: count must be >= 9 for uniform targets over 1..9");
  }
}

int rand_in(std::mt19937& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace

std::vector<DatasetEntry> gen_vd_entries(int count, const std::vector<char>& ops,
                                         unsigned seed) {
  check_count(count);
  check_ops(ops);
  std::mt19937 rng(seed);
  std::vector<DatasetEntry> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int target_digit = 1 + i % 9;
    bool built = false;
    for (int attempt = 0; attempt < kMaxAttempts && !built; ++attempt) {
      const char op = ops[static_cast<std::size_t>(rand_in(rng, 0, static_cast<int>(ops.size()) - 1))];
      const int x = rand_in(rng, 10, 99);
      const int y = rand_in(rng, 10, 99);
      if (op == '-' && x <= y) continue;
      const ArithmeticProblem orig{x, y, op};
      const int orig_digit = orig.answer_first_digit();
      if (orig_digit == target_digit) continue;
      std::vector<int> candidates;
      for (int alt_x = 10; alt_x <= 99; ++alt_x) {
        if (alt_x == x) continue;
        if (op == '-' && alt_x <= y) continue;
        if (ArithmeticProblem{alt_x, y, op}.answer_first_digit() == target_digit) {
          candidates.push_back(alt_x);
        }
      }
      if (candidates.empty()) continue;
      const int alt_x =
          candidates[static_cast<std::size_t>(rand_in(rng, 0, static_cast<int>(candidates.size()) - 1))];
      DatasetEntry e;
      e.kind = "vd";
      e.tuple.orig = orig.render();
      e.tuple.alt = ArithmeticProblem{alt_x, y, op}.render();
      e.tuple.target = target_digit;
      e.tuple.competing = orig_digit;
      e.meta = json{{"x", x}, {"y", y}, {"op", std::string(1, op)}, {"alt-x", alt_x}};
      e.tuple.validate();
      out.push_back(std::move(e));
      built = true;
    }
    if (!built) {
      throw GenerationError("gen_vd_tuples: cannot satisfy constraints for target digit " +
                            std::to_string(target_digit));
    }
  }
  return out;
}

std::vector<DesiderataTuple> gen_vd_tuples(int count, const std::vector<char>& ops,
                                           unsigned seed) {
  return dataset_tuples(gen_vd_entries(count, ops, seed));
}

std::vector<DatasetEntry> gen_oi_entries(int count,
                                         const std::vector<std::pair<char, char>>& op_pairs,
                                         unsigned seed) {
  check_count(count);
  if (op_pairs.empty()) throw GenerationError("gen_oi_tuples: no operation pairs given");
  for (const auto& [a, b] : op_pairs) {
    check_ops({a, b});
    if (a == b) throw GenerationError("gen_oi_tuples: pair must flip the operation");
  }
  std::mt19937 rng(seed);
  std::vector<DatasetEntry> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int target_digit = 1 + i % 9;
    bool built = false;
    for (int attempt = 0; attempt < kMaxAttempts && !built; ++attempt) {
      const auto& [op_orig, op_alt] =
          op_pairs[static_cast<std::size_t>(rand_in(rng, 0, static_cast<int>(op_pairs.size()) - 1))];
      const int x = rand_in(rng, 10, 99);
      const int y = rand_in(rng, 10, 99);
      if ((op_orig == '-' || op_alt == '-') && x <= y) continue;
      const ArithmeticProblem orig{x, y, op_orig};
      const ArithmeticProblem alt{x, y, op_alt};
      if (orig.answer_first_digit() != target_digit) continue;
      const int alt_digit = alt.answer_first_digit();
      if (alt_digit == target_digit) continue;
      DatasetEntry e;
      e.kind = "oi";
      e.tuple.orig = orig.render();
      e.tuple.alt = alt.render();
      e.tuple.target = target_digit;
      e.tuple.competing = alt_digit;
      e.meta = json{{"x", x},
                    {"y", y},
                    {"op", std::string(1, op_orig)},
                    {"alt-op", std::string(1, op_alt)}};
      e.tuple.validate();
      out.push_back(std::move(e));
      built = true;
    }
    if (!built) {
      throw GenerationError("gen_oi_tuples: cannot satisfy constraints for target digit " +
                            std::to_string(target_digit));
    }
  }
  return out;
}

std::vector<DesiderataTuple> gen_oi_tuples(int count,
                                           const std::vector<std::pair<char, char>>& op_pairs,
                                           unsigned seed) {
  return dataset_tuples(gen_oi_entries(count, op_pairs, seed));
}

std::vector<DatasetEntry> gen_recall_entries(int count, unsigned seed) {
  check_count(count);
  std::mt19937 rng(seed);
  std::vector<DatasetEntry> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int target_digit = 1 + i % 9;
    int d1 = target_digit;
    while (d1 == target_digit) d1 = rand_in(rng, 1, 9);
    const int d2 = rand_in(rng, 0, 9);
    const int e1 = rand_in(rng, 1, 9);
    const int e2 = rand_in(rng, 0, 9);
    DatasetEntry e;
    e.kind = "recall";
    e.tuple.orig = render_recall(d1, d2, e1, e2);
    e.tuple.alt = render_recall(target_digit, d2, e1, e2);
    e.tuple.target = target_digit;
    e.tuple.competing = d1;
    e.meta = json{{"x", d1 * 10 + d2},
                  {"y", e1 * 10 + e2},
                  {"op", "="},
                  {"alt-x", target_digit * 10 + d2}};
    e.tuple.validate();
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<DesiderataTuple> gen_recall_tuples(int count, unsigned seed) {
  return dataset_tuples(gen_recall_entries(count, seed));
}

// ---- dataset io ------------------------------------------------------------------

void save_dataset(const std::vector<DatasetEntry>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("save_dataset: cannot open " + path);
  for (const DatasetEntry& e : entries) {
    json line;
    line["kind"] = e.kind;
    line["orig-ids"] = e.tuple.orig;
    line["alt-ids"] = e.tuple.alt;
    line["target-id"] = e.tuple.target;
    line["competing-id"] = e.tuple.competing;
    line["meta"] = e.meta;
    f << line.dump() << "\n";
  }
}

std::vector<DatasetEntry> load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("load_dataset: cannot open " + path);
  std::vector<DatasetEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("dataset " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    DatasetEntry e;
    e.kind = j.at("kind").get<std::string>();
    e.tuple.orig = j.at("orig-ids").get<std::vector<int>>();
    e.tuple.alt = j.at("alt-ids").get<std::vector<int>>();
    e.tuple.target = j.at("target-id").get<int>();
    e.tuple.competing = j.at("competing-id").get<int>();
    if (j.contains("meta")) e.meta = j.at("meta");
    e.tuple.validate();
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<DesiderataTuple> dataset_tuples(const std::vector<DatasetEntry>& entries) {
  std::vector<DesiderataTuple> out;
  out.reserve(entries.size());
  for (const DatasetEntry& e : entries) out.push_back(e.tuple);
  return out;
}

// ---- training ----------------------------------------------------------------------

json TrainSpec::to_json() const {
  std::string ops_str;
  for (char op : ops) ops_str += op;
  return json{{"ops", ops_str},         {"heldout_count", heldout_count},
              {"batch_size", batch_size}, {"lr", lr},
              {"lr_min", lr_min},       {"warmup_steps", warmup_steps},
              {"max_steps", max_steps}, {"eval_every", eval_every},
              {"eval_subset", eval_subset}, {"target_acc", target_acc},
              {"min_acc", min_acc}};
}

TrainSpec TrainSpec::from_json(const json& j) {
  TrainSpec s;
  if (j.contains("ops")) {
    s.ops.clear();
    for (char op : j.at("ops").get<std::string>()) s.ops.push_back(op);
  }
  if (j.contains("heldout_count")) s.heldout_count = j.at("heldout_count").get<int>();
  if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) s.lr = j.at("lr").get<double>();
  if (j.contains("lr_min")) s.lr_min = j.at("lr_min").get<double>();
  if (j.contains("warmup_steps")) s.warmup_steps = j.at("warmup_steps").get<int>();
  if (j.contains("max_steps")) s.max_steps = j.at("max_steps").get<int>();
  if (j.contains("eval_every")) s.eval_every = j.at("eval_every").get<int>();
  if (j.contains("eval_subset")) s.eval_subset = j.at("eval_subset").get<int>();
  if (j.contains("target_acc")) s.target_acc = j.at("target_acc").get<double>();
  if (j.contains("min_acc")) s.min_acc = j.at("min_acc").get<double>();
  return s;
}

std::vector<ArithmeticProblem> enumerate_problems(const std::vector<char>& ops) {
  check_ops(ops);
  std::vector<ArithmeticProblem> out;
  for (char op : ops) {
    for (int x = 10; x <= 99; ++x) {
      for (int y = 10; y <= 99; ++y) {
        if (op == '-' && x <= y) continue;
        out.push_back({x, y, op});
      }
    }
  }
  return out;
}

double model_accuracy(const ModelParams& params,
                      const std::vector<ArithmeticProblem>& problems) {
  if (problems.empty()) return 0.0;
  const int seq_len = 14;
  const int chunk = 256;
  int hits = 0;
  for (std::size_t start = 0; start < problems.size(); start += chunk) {
    const int n = static_cast<int>(std::min<std::size_t>(chunk, problems.size() - start));
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(n) * seq_len);
    for (int b = 0; b < n; ++b) {
      const std::vector<int> r = problems[start + static_cast<std::size_t>(b)].render();
      ids.insert(ids.end(), r.begin(), r.end());
    }
    Tensor logits = forward_batched(params, ids, n);
    const int v = logits.dim(1);
    for (int b = 0; b < n; ++b) {
      const float* row =
          logits.data().data() + (static_cast<std::size_t>(b) * seq_len + seq_len - 1) * v;
      int best = 0;
      for (int j = 1; j < v; ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (best == problems[start + static_cast<std::size_t>(b)].answer_first_digit()) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(problems.size());
}

ModelParams train_toy_model(const ModelConfig& config, const TrainSpec& spec, unsigned seed,
                            TrainReport* report, const ModelParams* resume) {
  config.validate();
  if (spec.batch_size < 1 || spec.max_steps < 1 || spec.eval_every < 1) {
    throw ConfigError("train spec: batch_size, max_steps and eval_every must be >= 1");
  }
  std::vector<ArithmeticProblem> corpus = enumerate_problems(spec.ops);
  if (static_cast<int>(corpus.size()) <= spec.heldout_count) {
    throw ConfigError("train spec: heldout_count exceeds corpus size");
  }
  std::mt19937 rng(seed);
  std::shuffle(corpus.begin(), corpus.end(), rng);
  const std::vector<ArithmeticProblem> heldout(corpus.begin(),
                                               corpus.begin() + spec.heldout_count);
  const std::vector<ArithmeticProblem> train(corpus.begin() + spec.heldout_count,
                                             corpus.end());
  const std::vector<ArithmeticProblem> eval_subset(
      heldout.begin(),
      heldout.begin() + std::min<std::size_t>(heldout.size(),
                                              static_cast<std::size_t>(spec.eval_subset)));

  ModelParams params = resume ? resume->clone() : init_params(config, seed);
  params.set_trainable(true);
  Adam opt(params.all_tensors(), spec.lr);

  const int seq_len = 14;
  std::vector<int> answer_rows(static_cast<std::size_t>(spec.batch_size));
  for (int b = 0; b < spec.batch_size; ++b) answer_rows[static_cast<std::size_t>(b)] = b * seq_len + seq_len - 1;
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);

  TrainReport local;
  TrainReport& rep = report ? *report : local;
  rep.curve.clear();

  double last_loss = 0.0;
  int step = 0;
  bool reached = false;
  if (resume) {
    const double acc = model_accuracy(params, heldout);
    rep.curve.emplace_back(0, 0.0, acc);
    if (acc >= spec.target_acc) {
      rep.final_heldout_acc = acc;
      reached = true;
    }
  }
  while (step < spec.max_steps && !reached) {
    ++step;
    // linear warmup then cosine decay
    double lr = spec.lr;
    if (step <= spec.warmup_steps) {
      lr = spec.lr * static_cast<double>(step) / std::max(1, spec.warmup_steps);
    } else if (spec.max_steps > spec.warmup_steps) {
      const double t = static_cast<double>(step - spec.warmup_steps) /
                       static_cast<double>(spec.max_steps - spec.warmup_steps);
      lr = spec.lr_min + 0.5 * (spec.lr - spec.lr_min) * (1.0 + std::cos(3.14159265358979 * t));
    }
    opt.set_lr(lr);

    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(spec.batch_size) * seq_len);
    std::vector<int> targets(static_cast<std::size_t>(spec.batch_size));
    for (int b = 0; b < spec.batch_size; ++b) {
      const ArithmeticProblem& p = train[pick(rng)];
      const std::vector<int> r = p.render();
      ids.insert(ids.end(), r.begin(), r.end());
      targets[static_cast<std::size_t>(b)] = p.answer_first_digit();
    }

    Tape tape;
    Tensor logits = forward_batched(params, ids, spec.batch_size);
    Tensor answer_logits = gather_rows(logits, answer_rows);
    Tensor loss = cross_entropy_mean(answer_logits, targets);
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) {
      throw NumericalError("train_toy_model: loss diverged at step " + std::to_string(step));
    }
    opt.zero_grad();
    tape.backward(loss);
    opt.step();

    if (step % spec.eval_every == 0 || step == spec.max_steps) {
      const double acc = model_accuracy(params, eval_subset);
      rep.curve.emplace_back(step, last_loss, acc);
      if (spec.verbose) {
        std::fprintf(stderr, "train step %d: loss %.4f, held-out acc %.4f\n", step, last_loss,
                     acc);
      }
      if (acc >= spec.target_acc) {
        const double full = model_accuracy(params, heldout);
        if (full >= spec.target_acc) {
          rep.final_heldout_acc = full;
          reached = true;
        }
      }
    }
  }
  if (!reached) rep.final_heldout_acc = model_accuracy(params, heldout);
  rep.steps = step;

  params.set_trainable(false);
  if (rep.final_heldout_acc < spec.min_acc) {
    std::ostringstream os;
    os << "train_toy_model: budget exhausted at step " << step << " with held-out accuracy "
       << rep.final_heldout_acc << " (< " << spec.min_acc << "); curve:";
    for (const auto& [s, l, a] : rep.curve) os << " (" << s << ", " << l << ", " << a << ")";
    throw TrainingError(os.str());
  }
  return params;
}

// ---- planted circuit ------------------------------------------------------------

namespace {

// Embedding layout for the hand-built model: token one-hots in dims 0..17,
// position one-hots in 18..30, digit message channel in 31..40, distractor
// scratch in 41..59.
constexpr int kPlantedDim = 60;
constexpr int kPlantedHeads = 6;
constexpr int kPlantedLayers = 2;
constexpr int kPosBase = 18;
constexpr int kMsgBase = 31;
constexpr int kScratchBase = 41;
constexpr int kScratchDims = 19;
constexpr int kRecallLen = 13;
constexpr float kQkGain = 2.0f;
constexpr float kScratchScale = 0.3f;
constexpr float kReadout = 10.0f;

void zero_tensor(Tensor& t) {
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
}

void set2(Tensor& t, int row, int col, float v) {
  t.mutable_data()[static_cast<std::size_t>(row) * t.dim(1) + col] = v;
}

// Head attends from the query position (via its position one-hot) to the key
// position, and forwards the attended token's digit identity on its channel.
void wire_head(LayerParams& layer, int head, int query_pos, int key_pos) {
  const int c0 = head * 10;
  set2(layer.wq, kPosBase + query_pos, c0, kQkGain);
  set2(layer.wk, kPosBase + key_pos, c0, kQkGain);
  for (int g = 0; g < 10; ++g) set2(layer.wv, g, c0 + g, 1.0f);
}

}  // namespace

double planted_recall_accuracy(const ModelParams& params,
                               const std::vector<ComponentId>& ablated) {
  ContributionHook hook = nullptr;
  if (!ablated.empty()) {
    hook = [&ablated](const ComponentId& c, const Tensor& v) -> Tensor {
      for (const ComponentId& a : ablated) {
        if (a == c) return scale(v, 0.0f);
      }
      return v;
    };
  }
  int hits = 0, total = 0;
  for (int d1 = 1; d1 <= 9; ++d1) {
    for (int d2 = 1; d2 <= 9; ++d2) {
      Tensor logits = forward_core(params, render_recall(d1, d2, 4, 7), 1, hook, nullptr);
      const int v = logits.dim(1);
      const float* row =
          logits.data().data() + static_cast<std::size_t>(kRecallLen - 1) * v;
      int best = 0;
      for (int j = 1; j < v; ++j) {
        if (row[j] > row[best]) best = j;
      }
      hits += (best == d1) ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(hits) / total;
}

PlantedSpec build_planted_model() {
  ModelConfig config;
  config.n_layers = kPlantedLayers;
  config.n_heads = kPlantedHeads;
  config.d_model = kPlantedDim;
  config.d_mlp = 4;
  config.vocab_size = vocab::kSize;
  config.max_seq_len = kRecallLen;
  config.seed = 0;

  ModelParams p = init_params(config, 0);
  zero_tensor(p.tok_embed);
  zero_tensor(p.pos_embed);
  zero_tensor(p.unembed);
  for (auto& layer : p.layers) {
    zero_tensor(layer.wq);
    zero_tensor(layer.wk);
    zero_tensor(layer.wv);
    zero_tensor(layer.wo);
    zero_tensor(layer.w_up);
    zero_tensor(layer.w_gate);
    zero_tensor(layer.w_down);
  }

  for (int t = 0; t < vocab::kSize; ++t) set2(p.tok_embed, t, t, 1.0f);
  for (int pos = 0; pos < kRecallLen; ++pos) set2(p.pos_embed, pos, kPosBase + pos, 1.0f);
  for (int g = 0; g < 10; ++g) set2(p.unembed, kMsgBase + g, g, kReadout);

  const int query_pos = kRecallLen - 1;  // the '?' position

  // layer 0, head 0: the value-copying head; reads d1 at position 2 and writes
  // its identity into the digit message channel of the final position.
  wire_head(p.layers[0], 0, query_pos, 2);
  for (int g = 0; g < 10; ++g) set2(p.layers[0].wo, g, kMsgBase + g, 1.0f);

  // distractors attend to task-irrelevant positions (y's digits, d2) and write
  // digit-dependent junk into the scratch subspace at a small scale
  const int l0_keys[kPlantedHeads] = {2, 7, 8, 3, 7, 8};
  const int l1_keys[kPlantedHeads] = {3, 7, 8, 7, 3, 8};
  for (int h = 1; h < kPlantedHeads; ++h) {
    wire_head(p.layers[0], h, query_pos, l0_keys[h]);
    for (int g = 0; g < 10; ++g) {
      set2(p.layers[0].wo, h * 10 + g, kScratchBase + (g + 3 * h) % kScratchDims,
           kScratchScale);
    }
  }
  for (int h = 0; h < kPlantedHeads; ++h) {
    wire_head(p.layers[1], h, query_pos, l1_keys[h]);
    for (int g = 0; g < 10; ++g) {
      set2(p.layers[1].wo, h * 10 + g, kScratchBase + (g + 5 * h + 1) % kScratchDims,
           kScratchScale);
    }
  }

  PlantedSpec spec;
  spec.params = std::move(p);
  spec.ground_truth = {ComponentId{0, ComponentKind::AttentionHead, 0}};
  spec.recall_tuples = gen_recall_tuples(90, 1);

  // construction-time self-checks
  const double clean = planted_recall_accuracy(spec.params, {});
  if (clean < 1.0) {
    throw Error("planted model self-check failed: clean recall accuracy " +
                std::to_string(clean));
  }
  const double broken = planted_recall_accuracy(spec.params, spec.ground_truth);
  if (broken > 0.2) {
    throw Error("planted model self-check failed: ablating the designated head leaves "
                "accuracy " + std::to_string(broken));
  }
  for (const ComponentId& c : enumerate_components(config)) {
    if (c == spec.ground_truth[0]) continue;
    const double acc = planted_recall_accuracy(spec.params, {c});
    if (acc < 1.0) {
      throw Error("planted model self-check failed: ablating distractor " + c.str() +
                  " drops accuracy to " + std::to_string(acc));
    }
  }
  return spec;
}

}  // namespace cseek
