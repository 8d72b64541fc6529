#include "cseek/desiderata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cseek {

using nlohmann::json;

// ---- types ---------------------------------------------------------------

void DesiderataTuple::validate() const {
  if (orig.empty() || alt.empty()) throw ContractError("tuple: empty token sequence");
  if (orig.size() != alt.size()) {
    throw ContractError("tuple: original length " + std::to_string(orig.size()) +
                        " != alternate length " + std::to_string(alt.size()));
  }
  if (orig.back() != alt.back()) {
    throw ContractError("tuple: original and alternate must share the final token");
  }
  if (target == competing) {
    throw ContractError("tuple: target and competing tokens must differ");
  }
}

void DiscoveryConfig::validate() const {
  if (lambda < 0.0) throw ConfigError("discovery config: lambda must be >= 0");
  if (lr <= 0.0) throw ConfigError("discovery config: lr must be positive");
  if (steps_per_desideratum < 1 || total_rounds < 1) {
    throw ConfigError("discovery config: step counts must be >= 1");
  }
  if (!(init_weight > 0.0f && init_weight <= 1.0f)) {
    throw ConfigError("discovery config: init_weight must lie in (0,1]");
  }
  if (reg_epsilon <= 0.0f) throw ConfigError("discovery config: reg_epsilon must be positive");
  if (!(round_threshold > 0.0f && round_threshold < 1.0f)) {
    throw ConfigError("discovery config: round_threshold must lie in (0,1)");
  }
}

json DiscoveryConfig::to_json() const {
  return json{{"lambda", lambda},
              {"lr", lr},
              {"steps_per_desideratum", steps_per_desideratum},
              {"total_rounds", total_rounds},
              {"init_weight", init_weight},
              {"reg_epsilon", reg_epsilon},
              {"round_threshold", round_threshold},
              {"seed", seed},
              {"sum_objective", sum_objective}};
}

DiscoveryConfig DiscoveryConfig::from_json(const json& j) {
  DiscoveryConfig c;
  if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("steps_per_desideratum"))
    c.steps_per_desideratum = j.at("steps_per_desideratum").get<int>();
  if (j.contains("total_rounds")) c.total_rounds = j.at("total_rounds").get<int>();
  if (j.contains("init_weight")) c.init_weight = j.at("init_weight").get<float>();
  if (j.contains("reg_epsilon")) c.reg_epsilon = j.at("reg_epsilon").get<float>();
  if (j.contains("round_threshold")) c.round_threshold = j.at("round_threshold").get<float>();
  if (j.contains("seed")) c.seed = j.at("seed").get<unsigned>();
  if (j.contains("sum_objective")) c.sum_objective = j.at("sum_objective").get<bool>();
  c.validate();
  return c;
}

std::string DiscoveryConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

// ---- adam ------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw ContractError("adam: parameter has no gradient buffer");
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    const std::vector<float>& g = p.grad();
    float* w = p.mutable_data().data();
    float* m = m_[pi].data();
    float* v = v_[pi].data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

// ---- losses -----------------------------------------------------------------

Tensor tuple_loss(const ModelParams& params, const Mask& mask, const DesiderataTuple& tuple,
                  const AlternateCache& cache) {
  tuple.validate();
  Tensor logits = masked_forward(params, tuple.orig, cache, mask);
  return sub(select_item(logits, tuple.competing), select_item(logits, tuple.target));
}

Tensor tuple_loss_cached(const ModelParams& params, const OrigContext& ctx, const Mask& mask,
                         const DesiderataTuple& tuple, const AlternateCache& cache) {
  tuple.validate();
  Tensor logits = masked_forward_final(params, ctx, cache, mask);
  return sub(select_item(logits, tuple.competing), select_item(logits, tuple.target));
}

Tensor desideratum_loss(const ModelParams& params, const Mask& mask, const Desideratum& d,
                        const std::vector<AlternateCache>& caches) {
  if (d.tuples.empty()) throw ContractError("desideratum '" + d.name + "' has no tuples");
  if (d.tuples.size() != caches.size()) {
    throw ContractError("desideratum '" + d.name + "': " + std::to_string(d.tuples.size()) +
                        " tuples vs " + std::to_string(caches.size()) + " caches");
  }
  std::vector<Tensor> losses;
  losses.reserve(d.tuples.size());
  for (std::size_t i = 0; i < d.tuples.size(); ++i) {
    losses.push_back(tuple_loss(params, mask, d.tuples[i], caches[i]));
  }
  return mean_of(losses);
}

Tensor regularizer(const Mask& mask, double lambda, double eps) {
  if (lambda < 0.0) throw ContractError("regularizer: lambda must be >= 0");
  if (eps <= 0.0) throw ContractError("regularizer: eps must be positive");
  const float lam = static_cast<float>(lambda);
  const float ep = static_cast<float>(eps);
  const int n = mask.weights.dim(0);
  // lambda * sum sqrt(1 - w + eps), shifted to zero at w == 1 everywhere
  Tensor flipped = add_const(scale(mask.weights, -1.0f), 1.0f + ep);
  Tensor total = sum(sqrt_elem(flipped));
  return add_const(scale(total, lam), -lam * static_cast<float>(n) * std::sqrt(ep));
}

// ---- optimization ------------------------------------------------------------

DiscoveryResult optimize(const ModelParams& params, const std::vector<Desideratum>& desiderata,
                         const DiscoveryConfig& config) {
  config.validate();
  if (desiderata.empty()) throw ContractError("optimize: no desiderata given");
  for (const Desideratum& d : desiderata) {
    if (d.tuples.empty()) throw ContractError("optimize: desideratum '" + d.name + "' empty");
  }

  Mask mask = Mask::filled(params.config, config.init_weight);
  mask.weights.enable_grad();

  struct TupleCtx {
    OrigContext orig;
    AlternateCache alt;
  };
  std::vector<std::vector<TupleCtx>> ctx(desiderata.size());
  for (std::size_t di = 0; di < desiderata.size(); ++di) {
    for (const DesiderataTuple& tuple : desiderata[di].tuples) {
      tuple.validate();
      const std::vector<int> positions{static_cast<int>(tuple.orig.size()) - 1};
      TupleCtx tc;
      tc.alt = cache_alternate(params, tuple.alt, positions);
      tc.orig = prepare_original(params, tuple.orig);
      ctx[di].push_back(std::move(tc));
    }
  }

  Adam adam({mask.weights}, config.lr);
  std::vector<TrajectoryPoint> trajectory;
  int step = 0;
  std::string last_finite = "none";

  auto loss_for = [&](std::size_t di) {
    std::vector<Tensor> losses;
    losses.reserve(desiderata[di].tuples.size());
    for (std::size_t ti = 0; ti < desiderata[di].tuples.size(); ++ti) {
      losses.push_back(tuple_loss_cached(params, ctx[di][ti].orig, mask,
                                         desiderata[di].tuples[ti], ctx[di][ti].alt));
    }
    return mean_of(losses);
  };

  auto take_step = [&](const std::function<Tensor()>& build_loss, const std::string& name) {
    Tape tape;
    Tensor loss = build_loss();
    Tensor reg = regularizer(mask, config.lambda, config.reg_epsilon);
    Tensor total = add(loss, reg);
    if (!std::isfinite(total.item())) {
      throw NumericalError("optimize: loss diverged at step " + std::to_string(step) +
                           " (desideratum " + name + "); last finite step: " + last_finite);
    }
    adam.zero_grad();
    tape.backward(total);
    adam.step();
    mask.clamp01();
    for (float w : mask.weights.data()) {
      if (!(w >= 0.0f && w <= 1.0f)) {
        throw NumericalError("optimize: mask weights diverged (NaN) at step " +
                             std::to_string(step) + " (desideratum " + name +
                             "); last finite step: " + last_finite);
      }
    }
    TrajectoryPoint pt;
    pt.step = step;
    pt.desideratum = name;
    pt.loss = loss.item();
    pt.reg = reg.item();
    pt.n_below_threshold = mask.count_below(config.round_threshold);
    trajectory.push_back(pt);
    {
      std::ostringstream os;
      os << "step " << step << " (" << name << "): loss=" << pt.loss << " reg=" << pt.reg;
      last_finite = os.str();
    }
    ++step;
  };

  for (int round = 0; round < config.total_rounds; ++round) {
    if (config.sum_objective) {
      take_step(
          [&] {
            Tensor acc = loss_for(0);
            for (std::size_t di = 1; di < desiderata.size(); ++di)
              acc = add(acc, loss_for(di));
            return acc;
          },
          "combined");
    } else {
      for (std::size_t di = 0; di < desiderata.size(); ++di) {
        for (int s = 0; s < config.steps_per_desideratum; ++s) {
          take_step([&] { return loss_for(di); }, desiderata[di].name);
        }
      }
    }
  }

  DiscoveryResult result;
  result.binary = round_mask(mask, config.round_threshold);
  result.mask = std::move(mask);
  result.trajectory = std::move(trajectory);
  return result;
}

// ---- evaluation ----------------------------------------------------------------

namespace {

int argmax_token(const Tensor& logits) {
  const auto& d = logits.data();
  int best = 0;
  for (std::size_t i = 1; i < d.size(); ++i) {
    if (d[i] > d[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace

double evaluate_accuracy(const ModelParams& params, const BinaryMask& binary,
                         const std::vector<DesiderataTuple>& tuples) {
  if (tuples.empty()) return 0.0;
  int hits = 0;
  for (const DesiderataTuple& tuple : tuples) {
    tuple.validate();
    const std::vector<int> positions{static_cast<int>(tuple.orig.size()) - 1};
    AlternateCache cache = cache_alternate(params, tuple.alt, positions);
    Tensor logits = binary_forward(params, tuple.orig, cache, binary);
    hits += (argmax_token(logits) == tuple.target) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(tuples.size());
}

double evaluate_accuracy_continuous(const ModelParams& params, const Mask& mask,
                                    const std::vector<DesiderataTuple>& tuples) {
  if (tuples.empty()) return 0.0;
  int hits = 0;
  for (const DesiderataTuple& tuple : tuples) {
    tuple.validate();
    const std::vector<int> positions{static_cast<int>(tuple.orig.size()) - 1};
    AlternateCache cache = cache_alternate(params, tuple.alt, positions);
    Tensor logits = masked_forward(params, tuple.orig, cache, mask);
    hits += (argmax_token(logits) == tuple.target) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(tuples.size());
}

void write_trajectory_csv(const std::vector<TrajectoryPoint>& trajectory,
                          const std::vector<std::string>& desiderata_names,
                          const std::string& path, const std::string& header_comment) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_trajectory_csv: cannot open " + path);
  if (!header_comment.empty()) f << "# " << header_comment << "\n";
  f << "step,stepped";
  for (const std::string& name : desiderata_names) f << ",loss_" << name;
  f << ",regularizer,n_below_threshold\n";
  std::vector<std::string> last(desiderata_names.size());
  char buf[64];
  for (const TrajectoryPoint& pt : trajectory) {
    for (std::size_t i = 0; i < desiderata_names.size(); ++i) {
      if (desiderata_names[i] == pt.desideratum) {
        std::snprintf(buf, sizeof(buf), "%.9g", pt.loss);
        last[i] = buf;
      }
    }
    f << pt.step << "," << pt.desideratum;
    for (const std::string& cell : last) f << "," << cell;
    std::snprintf(buf, sizeof(buf), "%.9g", pt.reg);
    f << "," << buf << "," << pt.n_below_threshold << "\n";
  }
}

}  // namespace cseek
