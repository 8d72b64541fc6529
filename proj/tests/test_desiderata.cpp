#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "cseek/desiderata.hpp"
#include "cseek/tasks.hpp"
#include "doctest.h"

using namespace cseek;

namespace {

DesiderataTuple make_tuple(std::vector<int> orig, std::vector<int> alt, int t, int r) {
  DesiderataTuple tuple;
  tuple.orig = std::move(orig);
  tuple.alt = std::move(alt);
  tuple.target = t;
  tuple.competing = r;
  return tuple;
}

}  // namespace

TEST_CASE("tuple validation") {
  CHECK_NOTHROW(make_tuple({1, 2, 3}, {4, 5, 3}, 0, 1).validate());
  CHECK_THROWS_AS(make_tuple({1, 2}, {4, 5, 3}, 0, 1).validate(), ContractError);
  CHECK_THROWS_AS(make_tuple({1, 2, 3}, {4, 5, 6}, 0, 1).validate(), ContractError);
  CHECK_THROWS_AS(make_tuple({1, 2, 3}, {4, 5, 3}, 1, 1).validate(), ContractError);
}

TEST_CASE("tuple_loss equals clean logit difference under a self full patch") {
  PlantedSpec planted = build_planted_model();
  const ModelParams& p = planted.params;
  DesiderataTuple tuple = planted.recall_tuples[0];
  tuple.alt = tuple.orig;  // a = o

  const std::vector<int> positions{static_cast<int>(tuple.orig.size()) - 1};
  AlternateCache cache = cache_alternate(p, tuple.alt, positions);
  Tensor loss = tuple_loss(p, Mask::filled(p.config, 0.0f), tuple, cache);

  Tensor clean = forward(p, tuple.orig);
  const int last = clean.dim(0) - 1;
  const float want = clean.at(last, tuple.competing) - clean.at(last, tuple.target);
  CHECK(loss.item() == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("full patch on a change-to-alternate tuple gives the alternate's loss") {
  PlantedSpec planted = build_planted_model();
  const ModelParams& p = planted.params;
  const DesiderataTuple& tuple = planted.recall_tuples[0];
  const std::vector<int> positions{static_cast<int>(tuple.orig.size()) - 1};
  AlternateCache cache = cache_alternate(p, tuple.alt, positions);

  Tensor loss = tuple_loss(p, Mask::filled(p.config, 0.0f), tuple, cache);
  Tensor alt_logits = forward(p, tuple.alt);
  const int last = alt_logits.dim(0) - 1;
  const float want = alt_logits.at(last, tuple.competing) - alt_logits.at(last, tuple.target);
  CHECK(loss.item() == doctest::Approx(want).epsilon(1e-4));
  // the planted model answers the alternate's digit, so the loss is negative
  CHECK(loss.item() < 0.0f);
}

TEST_CASE("tuple_loss through the cached fast path matches the general path") {
  PlantedSpec planted = build_planted_model();
  const ModelParams& p = planted.params;
  const DesiderataTuple& tuple = planted.recall_tuples[3];
  const std::vector<int> positions{static_cast<int>(tuple.orig.size()) - 1};
  AlternateCache cache = cache_alternate(p, tuple.alt, positions);
  OrigContext ctx = prepare_original(p, tuple.orig);
  Mask mask = Mask::filled(p.config, 0.4f);
  Tensor general = tuple_loss(p, mask, tuple, cache);
  Tensor fast = tuple_loss_cached(p, ctx, mask, tuple, cache);
  CHECK(fast.item() == doctest::Approx(general.item()).epsilon(1e-4));
}

TEST_CASE("desideratum_loss is the mean of tuple losses") {
  PlantedSpec planted = build_planted_model();
  const ModelParams& p = planted.params;
  Mask mask = Mask::filled(p.config, 0.5f);

  Desideratum d{"recall", Direction::ChangeToAlternate,
                {planted.recall_tuples[0], planted.recall_tuples[1]}};
  std::vector<AlternateCache> caches;
  for (const auto& tuple : d.tuples) {
    caches.push_back(cache_alternate(p, tuple.alt, {static_cast<int>(tuple.orig.size()) - 1}));
  }
  const float l0 = tuple_loss(p, mask, d.tuples[0], caches[0]).item();
  const float l1 = tuple_loss(p, mask, d.tuples[1], caches[1]).item();
  const float mean = desideratum_loss(p, mask, d, caches).item();
  CHECK(mean == doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-6));

  Desideratum single{"one", Direction::ChangeToAlternate, {d.tuples[0]}};
  CHECK(desideratum_loss(p, mask, single, {caches[0]}).item() ==
        doctest::Approx(l0).epsilon(1e-7));

  Desideratum dup{"dup", Direction::ChangeToAlternate,
                  {d.tuples[0], d.tuples[0], d.tuples[0]}};
  CHECK(desideratum_loss(p, mask, dup, {caches[0], caches[0], caches[0]}).item() ==
        doctest::Approx(l0).epsilon(1e-6));

  Desideratum empty{"empty", Direction::ChangeToAlternate, {}};
  CHECK_THROWS_AS(desideratum_loss(p, mask, empty, {}), ContractError);
  CHECK_THROWS_AS(desideratum_loss(p, mask, d, {caches[0]}), ContractError);
}

TEST_CASE("regularizer values and monotonicity") {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_mlp = 4;
  const int n = static_cast<int>(enumerate_components(c).size());
  const double lambda = 0.03;
  const double tiny_eps = 1e-12;

  CHECK(regularizer(Mask::filled(c, 1.0f), lambda, 1e-6).item() == doctest::Approx(0.0));
  CHECK(regularizer(Mask::filled(c, 0.0f), lambda, tiny_eps).item() ==
        doctest::Approx(lambda * n).epsilon(1e-4));

  Mask one_patched = Mask::filled(c, 1.0f);
  one_patched.weights.mutable_data()[0] = 0.75f;
  CHECK(regularizer(one_patched, lambda, tiny_eps).item() ==
        doctest::Approx(lambda * 0.5).epsilon(1e-3));

  CHECK(regularizer(Mask::filled(c, 0.3f), 0.0, 1e-6).item() == doctest::Approx(0.0));

  // decreasing any single weight strictly increases the penalty
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> dist(0.05f, 1.0f);
  Mask m = Mask::filled(c, 1.0f);
  for (float& w : m.weights.mutable_data()) w = dist(rng);
  const float base = regularizer(m, lambda, 1e-6).item();
  for (int i = 0; i < n; ++i) {
    Mask lower = Mask::filled(c, 1.0f);
    lower.weights = Tensor::from_data(m.weights.shape(), m.weights.data());
    lower.weights.mutable_data()[static_cast<std::size_t>(i)] -= 0.04f;
    CHECK(regularizer(lower, lambda, 1e-6).item() > base);
  }

  CHECK_THROWS_AS(regularizer(m, -0.1, 1e-6), ContractError);
  CHECK_THROWS_AS(regularizer(m, 0.1, 0.0), ContractError);
}

TEST_CASE("adam minimizes a quadratic and validates inputs") {
  Tensor w = Tensor::from_data({3}, {5.0f, -4.0f, 2.0f}, true);
  Adam opt({w}, 0.05);
  for (int step = 0; step < 400; ++step) {
    Tape tape;
    Tensor target = Tensor::from_data({3}, {1.0f, 2.0f, -1.0f});
    Tensor diff = sub(w, target);
    Tensor loss = sum(mul(diff, diff));
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  CHECK(w.data()[0] == doctest::Approx(1.0f).epsilon(0.02));
  CHECK(w.data()[1] == doctest::Approx(2.0f).epsilon(0.02));
  CHECK(w.data()[2] == doctest::Approx(-1.0f).epsilon(0.02));

  Tensor plain = Tensor::zeros({2});
  CHECK_THROWS_AS(Adam({plain}, 0.01), ContractError);
}

TEST_CASE("discovery config validation and round trip") {
  DiscoveryConfig c;
  CHECK_NOTHROW(c.validate());
  DiscoveryConfig back = DiscoveryConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());

  DiscoveryConfig bad = c;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.init_weight = 0.0f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.round_threshold = 1.0f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("optimize recovers the planted circuit") {
  PlantedSpec planted = build_planted_model();
  Desideratum recall{"vd", Direction::ChangeToAlternate, planted.recall_tuples};

  DiscoveryConfig config;
  config.total_rounds = 150;
  DiscoveryResult result = optimize(planted.params, {recall}, config);

  CHECK(result.binary.patched.size() == 1);
  CHECK(result.binary.patched.count(planted.ground_truth[0]) == 1);
  for (float w : result.mask.weights.data()) {
    CHECK(w >= 0.0f);
    CHECK(w <= 1.0f);
  }
  CHECK(result.trajectory.size() == 150);

  const double acc = evaluate_accuracy(planted.params, result.binary, planted.recall_tuples);
  CHECK(acc == doctest::Approx(1.0));
}

TEST_CASE("huge sparsity weight forces an empty patched set") {
  PlantedSpec planted = build_planted_model();
  Desideratum recall{"vd", Direction::ChangeToAlternate,
                     std::vector<DesiderataTuple>(planted.recall_tuples.begin(),
                                                  planted.recall_tuples.begin() + 12)};
  DiscoveryConfig config;
  config.lambda = 1000.0;
  config.total_rounds = 120;
  DiscoveryResult result = optimize(planted.params, {recall}, config);
  CHECK(result.binary.patched.empty());

  // empty patched set behaves like the clean model
  const DesiderataTuple& tuple = recall.tuples[0];
  AlternateCache cache =
      cache_alternate(planted.params, tuple.alt, {static_cast<int>(tuple.orig.size()) - 1});
  Tensor patched = binary_forward(planted.params, tuple.orig, cache, result.binary);
  Tensor clean = forward(planted.params, tuple.orig);
  const int last = clean.dim(0) - 1;
  for (int i = 0; i < planted.params.config.vocab_size; ++i) {
    CHECK(std::abs(patched.data()[static_cast<std::size_t>(i)] - clean.at(last, i)) < 1e-5f);
  }
}

TEST_CASE("zero sparsity weight patches weakly more than the default") {
  PlantedSpec planted = build_planted_model();
  Desideratum recall{"vd", Direction::ChangeToAlternate,
                     std::vector<DesiderataTuple>(planted.recall_tuples.begin(),
                                                  planted.recall_tuples.begin() + 12)};
  DiscoveryConfig with_reg;
  with_reg.total_rounds = 120;
  DiscoveryConfig no_reg = with_reg;
  no_reg.lambda = 0.0;

  const BinaryMask sparse = optimize(planted.params, {recall}, with_reg).binary;
  const BinaryMask loose = optimize(planted.params, {recall}, no_reg).binary;
  for (const ComponentId& cid : sparse.patched) {
    CHECK(loose.patched.count(cid) == 1);
  }
}

TEST_CASE("optimize is deterministic for a fixed config") {
  PlantedSpec planted = build_planted_model();
  Desideratum recall{"vd", Direction::ChangeToAlternate,
                     std::vector<DesiderataTuple>(planted.recall_tuples.begin(),
                                                  planted.recall_tuples.begin() + 10)};
  DiscoveryConfig config;
  config.total_rounds = 40;
  DiscoveryResult a = optimize(planted.params, {recall}, config);
  DiscoveryResult b = optimize(planted.params, {recall}, config);
  CHECK(a.mask.weights.data() == b.mask.weights.data());
  CHECK(a.binary.patched == b.binary.patched);
}

TEST_CASE("divergent loss aborts with a diagnostic") {
  PlantedSpec planted = build_planted_model();
  ModelParams broken = planted.params.clone();
  broken.unembed.mutable_data()[0] = std::numeric_limits<float>::infinity();
  Desideratum recall{"vd", Direction::ChangeToAlternate,
                     std::vector<DesiderataTuple>(planted.recall_tuples.begin(),
                                                  planted.recall_tuples.begin() + 9)};
  DiscoveryConfig config;
  config.total_rounds = 5;
  CHECK_THROWS_WITH_AS(optimize(broken, {recall}, config), doctest::Contains("diverged"),
                       NumericalError);
}

TEST_CASE("evaluate_accuracy on ground-truth and identity masks") {
  PlantedSpec planted = build_planted_model();
  BinaryMask gt;
  gt.patched = {planted.ground_truth[0]};
  CHECK(evaluate_accuracy(planted.params, gt, planted.recall_tuples) == doctest::Approx(1.0));

  // no-op patch: the clean model keeps answering the original digit
  BinaryMask empty;
  CHECK(evaluate_accuracy(planted.params, empty, planted.recall_tuples) ==
        doctest::Approx(0.0));

  // full patch flips every answer to the alternate's digit
  BinaryMask full;
  for (const ComponentId& cid : enumerate_components(planted.params.config)) {
    full.patched.insert(cid);
  }
  CHECK(evaluate_accuracy(planted.params, full, planted.recall_tuples) ==
        doctest::Approx(1.0));
}

TEST_CASE("trajectory csv has the expected columns") {
  std::vector<TrajectoryPoint> traj;
  traj.push_back({0, "vd", -1.5, 0.01, 3});
  traj.push_back({1, "oi", 0.25, 0.02, 4});
  const std::string path = "cseek_test_traj_" + std::to_string(getpid()) + ".csv";
  write_trajectory_csv(traj, {"vd", "oi"}, path, "config-hash abc seed 1");
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "# config-hash abc seed 1");
  std::getline(f, line);
  CHECK(line == "step,stepped,loss_vd,loss_oi,regularizer,n_below_threshold");
  std::getline(f, line);
  CHECK(line == "0,vd,-1.5,,0.01,3");
  std::getline(f, line);
  CHECK(line == "1,oi,-1.5,0.25,0.02,4");
  std::remove(path.c_str());
}
