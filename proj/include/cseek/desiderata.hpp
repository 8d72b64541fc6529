#pragma once

#include <string>
#include <vector>

#include "cseek/patching.hpp"

namespace cseek {

// One causal example: patching the circuitry while running orig should move
// the model's final-position output toward target and away from competing.
struct DesiderataTuple {
  std::vector<int> orig;
  std::vector<int> alt;
  int target = -1;
  int competing = -1;

  void validate() const;  // equal length, shared final token, target != competing
};

enum class Direction { ChangeToAlternate, PreserveOriginal };

// Named set of tuples expressing one causal property of the sought circuitry.
// The direction records how (target, competing) were assigned at generation
// time; the loss itself is uniform across directions.
struct Desideratum {
  std::string name;
  Direction direction = Direction::ChangeToAlternate;
  std::vector<DesiderataTuple> tuples;
};

struct DiscoveryConfig {
  double lambda = 0.03;
  double lr = 0.01;
  int steps_per_desideratum = 1;
  int total_rounds = 400;
  float init_weight = 0.95f;
  float reg_epsilon = 1e-6f;
  float round_threshold = 0.5f;
  unsigned seed = 0;
  bool sum_objective = false;  // sum desiderata losses instead of alternating

  void validate() const;
  nlohmann::json to_json() const;
  static DiscoveryConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Adam over a fixed set of grad-enabled tensors.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// logit(competing) - logit(target) of the masked forward pass at the final
// position; minimizing drives the patched model toward the target answer.
Tensor tuple_loss(const ModelParams& params, const Mask& mask, const DesiderataTuple& tuple,
                  const AlternateCache& cache);

// Same loss through the precomputed final-token fast path.
Tensor tuple_loss_cached(const ModelParams& params, const OrigContext& ctx, const Mask& mask,
                         const DesiderataTuple& tuple, const AlternateCache& cache);

// Mean of tuple_loss over the desideratum's tuples (one cache per tuple).
Tensor desideratum_loss(const ModelParams& params, const Mask& mask, const Desideratum& d,
                        const std::vector<AlternateCache>& caches);

// lambda * sum_i sqrt(1 - w_i + eps), shifted so an all-ones mask scores zero.
Tensor regularizer(const Mask& mask, double lambda, double eps);

struct TrajectoryPoint {
  int step = 0;
  std::string desideratum;
  double loss = 0.0;
  double reg = 0.0;
  int n_below_threshold = 0;
};

struct DiscoveryResult {
  Mask mask;
  BinaryMask binary;
  std::vector<TrajectoryPoint> trajectory;
};

// Learns the mask: init_weight everywhere, then total_rounds rounds of
// steps_per_desideratum Adam steps on (desideratum_loss + regularizer) for
// each desideratum in turn, clamping to [0,1] after every step.
DiscoveryResult optimize(const ModelParams& params, const std::vector<Desideratum>& desiderata,
                         const DiscoveryConfig& config);

// Fraction of tuples whose patched argmax over the full vocabulary equals the
// target token. Ties resolve to the lowest token id.
double evaluate_accuracy(const ModelParams& params, const BinaryMask& binary,
                         const std::vector<DesiderataTuple>& tuples);
double evaluate_accuracy_continuous(const ModelParams& params, const Mask& mask,
                                    const std::vector<DesiderataTuple>& tuples);

void write_trajectory_csv(const std::vector<TrajectoryPoint>& trajectory,
                          const std::vector<std::string>& desiderata_names,
                          const std::string& path, const std::string& header_comment = "");

}  // namespace cseek
