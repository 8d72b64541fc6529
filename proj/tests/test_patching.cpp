#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "cseek/patching.hpp"
#include "doctest.h"
#include "gradient_probe.hpp"
#include "reference_model.hpp"

using namespace cseek;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_mlp = 16;
  c.vocab_size = 7;
  c.max_seq_len = 6;
  c.seed = 0;
  return c;
}

// larger-scale random weights give every component a residual write whose
// patch visibly moves the logits
ModelParams boosted_params(const ModelConfig& c, unsigned seed, float mult) {
  ModelParams p = init_params(c, seed);
  for (Tensor& t : p.all_tensors()) {
    for (float& v : t.mutable_data()) v *= mult;
  }
  for (auto& layer : p.layers) {  // gains stay at one
    std::fill(layer.rms1_gain.mutable_data().begin(), layer.rms1_gain.mutable_data().end(),
              1.0f);
    std::fill(layer.rms2_gain.mutable_data().begin(), layer.rms2_gain.mutable_data().end(),
              1.0f);
  }
  std::fill(p.final_gain.mutable_data().begin(), p.final_gain.mutable_data().end(), 1.0f);
  return p;
}

// two equal-length sequences sharing the final token
std::pair<std::vector<int>, std::vector<int>> tuple_tokens(const ModelConfig& c,
                                                           std::mt19937& rng) {
  std::uniform_int_distribution<int> dist(0, c.vocab_size - 1);
  std::vector<int> orig(5), alt(5);
  for (int i = 0; i < 4; ++i) {
    orig[static_cast<std::size_t>(i)] = dist(rng);
    alt[static_cast<std::size_t>(i)] = dist(rng);
  }
  orig[4] = alt[4] = dist(rng);
  return {orig, alt};
}

Tensor final_row(const Tensor& logits) {
  return select_row(logits, logits.dim(0) - 1);
}

}  // namespace

TEST_CASE("all-ones mask reproduces the clean forward") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 2);
  std::mt19937 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto [orig, alt] = tuple_tokens(c, rng);
    AlternateCache cache = cache_alternate(p, alt, {4});
    Tensor patched = masked_forward(p, orig, cache, Mask::ones(c));
    Tensor clean = final_row(forward(p, orig));
    for (int i = 0; i < c.vocab_size; ++i) {
      CHECK(std::abs(patched.data()[static_cast<std::size_t>(i)] -
                     clean.data()[static_cast<std::size_t>(i)]) < 1e-6f);
    }
  }
}

TEST_CASE("all-zeros mask reproduces the alternate run's final logits") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 5);
  std::mt19937 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto [orig, alt] = tuple_tokens(c, rng);
    AlternateCache cache = cache_alternate(p, alt, {4});
    Tensor patched = masked_forward(p, orig, cache, Mask::filled(c, 0.0f));
    REQUIRE(cache.alt_final_logits.size() == static_cast<std::size_t>(c.vocab_size));
    for (int i = 0; i < c.vocab_size; ++i) {
      CHECK(std::abs(patched.data()[static_cast<std::size_t>(i)] -
                     cache.alt_final_logits[static_cast<std::size_t>(i)]) < 1e-4f);
    }
  }
}

TEST_CASE("single-component patch matches an independently coded manual patch") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 11);
  std::mt19937 rng(13);
  auto [orig, alt] = tuple_tokens(c, rng);
  AlternateCache cache = cache_alternate(p, alt, {4});

  for (const ComponentId& target : enumerate_components(c)) {
    Mask mask = Mask::ones(c);
    mask.set_weight(target, 0.0f);
    Tensor got = masked_forward(p, orig, cache, mask);

    refmodel::Patch patch;
    patch[target][4] = cache.values.at(target)[0];
    const std::vector<float> ref = refmodel::forward_ref(p, orig, patch);
    for (int i = 0; i < c.vocab_size; ++i) {
      CHECK(std::abs(got.data()[static_cast<std::size_t>(i)] -
                     ref[static_cast<std::size_t>(4 * c.vocab_size + i)]) < 1e-4f);
    }
  }
}

TEST_CASE("absorption: self-cache full patch is exact, partial within 1e-4") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 17);
  std::mt19937 rng(19);
  auto [orig, unused] = tuple_tokens(c, rng);
  AlternateCache self_cache = cache_alternate(p, orig, {4});
  Tensor clean = final_row(forward(p, orig));

  Tensor zeros_mask = masked_forward(p, orig, self_cache, Mask::filled(c, 0.0f));
  CHECK(zeros_mask.data() == clean.data());  // exact by construction

  std::uniform_real_distribution<float> udist(0.0f, 1.0f);
  for (int trial = 0; trial < 5; ++trial) {
    Mask mask = Mask::ones(c);
    for (float& w : mask.weights.mutable_data()) w = udist(rng);
    Tensor mixed = masked_forward(p, orig, self_cache, mask);
    for (int i = 0; i < c.vocab_size; ++i) {
      CHECK(std::abs(mixed.data()[static_cast<std::size_t>(i)] -
                     clean.data()[static_cast<std::size_t>(i)]) < 1e-4f);
    }
  }
}

TEST_CASE("mask-weight gradients match finite differences") {
  // Uses the wired probe model: every component's gradient is bounded away
  // from the f32 finite-difference noise floor, so per-component relative
  // error is measurable.
  auto probe = gradprobe::make_probe(29);
  const ModelParams& p = probe.params;
  const int final_pos = gradprobe::kSeqLen - 1;
  std::vector<AlternateCache> caches;
  for (const auto& tuple : probe.tuples) {
    caches.push_back(cache_alternate(p, tuple.alt, {final_pos}));
  }

  auto mean_loss = [&](const Mask& m) {
    std::vector<Tensor> losses;
    for (std::size_t i = 0; i < probe.tuples.size(); ++i) {
      Tensor logits = masked_forward(p, probe.tuples[i].orig, caches[i], m);
      losses.push_back(sub(select_item(logits, probe.tuples[i].competing),
                           select_item(logits, probe.tuples[i].target)));
    }
    return mean_of(losses);
  };

  Mask mask = Mask::filled(p.config, 0.6f);
  mask.weights.enable_grad();
  {
    Tape tape;
    tape.backward(mean_loss(mask));
  }
  const std::vector<float> analytic = mask.weights.grad();

  std::mt19937 rng(31);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(mask.components.size()) - 1);
  const float h = 1e-3f;
  for (int trial = 0; trial < 10; ++trial) {
    const int idx = pick(rng);
    auto eval = [&](float w) {
      Mask m2 = Mask::filled(p.config, 0.6f);
      m2.weights.mutable_data()[static_cast<std::size_t>(idx)] = w;
      return static_cast<double>(mean_loss(m2).item());
    };
    const double numeric = (eval(0.6f + h) - eval(0.6f - h)) / (2.0 * h);
    const double a = analytic[static_cast<std::size_t>(idx)];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    CHECK(rel < 1e-3);
  }
}

TEST_CASE("logits are continuous in a single blend weight") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 31);
  std::mt19937 rng(37);
  auto [orig, alt] = tuple_tokens(c, rng);
  AlternateCache cache = cache_alternate(p, alt, {4});
  const ComponentId target{1, ComponentKind::AttentionHead, 0};

  auto logits_at = [&](float w) {
    Mask m = Mask::ones(c);
    m.set_weight(target, w);
    return masked_forward(p, orig, cache, m);
  };
  for (float w = 0.0f; w < 1.0f; w += 0.1f) {
    Tensor a = logits_at(w);
    Tensor b = logits_at(std::min(1.0f, w + 1e-3f));
    for (int i = 0; i < c.vocab_size; ++i) {
      CHECK(std::abs(a.data()[static_cast<std::size_t>(i)] -
                     b.data()[static_cast<std::size_t>(i)]) < 1e-2f);
    }
  }
}

TEST_CASE("round_mask thresholds") {
  ModelConfig c = small_config();
  Mask ones = Mask::ones(c);
  CHECK(round_mask(ones, 0.5f).patched.empty());

  Mask m = Mask::ones(c);
  m.weights.mutable_data()[0] = 0.1f;
  m.weights.mutable_data()[1] = 0.9f;
  BinaryMask b = round_mask(m, 0.5f);
  CHECK(b.patched.size() == 1);
  CHECK(b.patched.count(m.components[0]) == 1);

  // strict less-than: a weight exactly at the threshold stays unpatched
  Mask tie = Mask::ones(c);
  tie.weights.mutable_data()[2] = 0.5f;
  CHECK(round_mask(tie, 0.5f).patched.empty());

  CHECK_THROWS_AS(round_mask(ones, 0.0f), ContractError);
  CHECK_THROWS_AS(round_mask(ones, 1.0f), ContractError);
}

TEST_CASE("binary_forward equals masked_forward with 0/1 weights") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 41);
  std::mt19937 rng(43);
  auto [orig, alt] = tuple_tokens(c, rng);
  AlternateCache cache = cache_alternate(p, alt, {4});

  BinaryMask binary;
  binary.patched = {ComponentId{0, ComponentKind::AttentionHead, 1},
                    ComponentId{1, ComponentKind::Mlp, -1}};
  Tensor via_binary = binary_forward(p, orig, cache, binary);

  Mask mask = Mask::ones(c);
  for (const ComponentId& cid : binary.patched) mask.set_weight(cid, 0.0f);
  Tensor via_mask = masked_forward(p, orig, cache, mask);
  CHECK(via_binary.data() == via_mask.data());

  BinaryMask empty;
  Tensor noop = binary_forward(p, orig, cache, empty);
  Tensor clean = final_row(forward(p, orig));
  for (int i = 0; i < c.vocab_size; ++i) {
    CHECK(std::abs(noop.data()[static_cast<std::size_t>(i)] -
                   clean.data()[static_cast<std::size_t>(i)]) < 1e-6f);
  }
}

TEST_CASE("cache_alternate equals the clean trace and validates alignment") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 47);
  std::mt19937 rng(53);
  auto [orig, alt] = tuple_tokens(c, rng);

  AlternateCache cache = cache_alternate(p, alt, {4});
  ForwardTrace trace = forward_traced(p, alt, {4});
  for (const auto& [cid, rows] : trace.contributions) {
    CHECK(cache.values.at(cid)[0] == rows[0]);  // same computation, bit-identical
  }

  ModelParams zeroed = init_params(c, 47);
  zero_output_projections(zeroed);
  AlternateCache zcache = cache_alternate(zeroed, alt, {4});
  for (const auto& [cid, rows] : zcache.values) {
    for (float v : rows[0]) CHECK(v == 0.0f);
  }

  CHECK_THROWS_AS(cache_alternate(p, alt, {5}), AlignmentError);  // position out of range

  // length mismatch against the cache
  std::vector<int> longer = orig;
  longer.push_back(orig.back());
  CHECK_THROWS_AS(masked_forward(p, longer, cache, Mask::ones(c)), AlignmentError);

  // differing token at the patched position
  std::vector<int> moved = orig;
  moved[4] = (moved[4] + 1) % c.vocab_size;
  CHECK_THROWS_AS(masked_forward(p, moved, cache, Mask::filled(c, 0.5f)), AlignmentError);
}

TEST_CASE("missing cache entry for a patched component is a contract error") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 59);
  std::mt19937 rng(61);
  auto [orig, alt] = tuple_tokens(c, rng);
  AlternateCache cache = cache_alternate(p, alt, {4});
  const ComponentId victim{0, ComponentKind::AttentionHead, 0};
  cache.values.erase(victim);

  Mask mask = Mask::ones(c);
  mask.set_weight(victim, 0.3f);
  CHECK_THROWS_AS(masked_forward(p, orig, cache, mask), ContractError);

  // with the component unpatched the cache gap is irrelevant
  Mask ok = Mask::ones(c);
  CHECK_NOTHROW(masked_forward(p, orig, cache, ok));
}

TEST_CASE("weights outside [0,1] are rejected") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 67);
  std::mt19937 rng(71);
  auto [orig, alt] = tuple_tokens(c, rng);
  AlternateCache cache = cache_alternate(p, alt, {4});
  Mask mask = Mask::ones(c);
  mask.weights.mutable_data()[3] = 1.25f;
  CHECK_THROWS_AS(masked_forward(p, orig, cache, mask), ContractError);
}

TEST_CASE("final-token fast path equals the general path") {
  ModelConfig c = small_config();
  ModelParams p = init_params(c, 73);
  std::mt19937 rng(79);
  std::uniform_real_distribution<float> udist(0.0f, 1.0f);
  for (int trial = 0; trial < 5; ++trial) {
    auto [orig, alt] = tuple_tokens(c, rng);
    AlternateCache cache = cache_alternate(p, alt, {4});
    OrigContext ctx = prepare_original(p, orig);
    Mask mask = Mask::ones(c);
    for (float& w : mask.weights.mutable_data()) w = udist(rng);
    Tensor fast = masked_forward_final(p, ctx, cache, mask);
    Tensor general = masked_forward(p, orig, cache, mask);
    for (int i = 0; i < c.vocab_size; ++i) {
      CHECK(std::abs(fast.data()[static_cast<std::size_t>(i)] -
                     general.data()[static_cast<std::size_t>(i)]) < 1e-4f);
    }
  }
}

TEST_CASE("fast-path gradients agree with the general path") {
  ModelConfig c = small_config();
  ModelParams p = boosted_params(c, 83, 8.0f);
  std::mt19937 rng(89);
  auto [orig, alt] = tuple_tokens(c, rng);
  AlternateCache cache = cache_alternate(p, alt, {4});
  OrigContext ctx = prepare_original(p, orig);

  auto grads_via = [&](bool fast) {
    Mask mask = Mask::filled(c, 0.7f);
    mask.weights.enable_grad();
    Tape tape;
    Tensor logits = fast ? masked_forward_final(p, ctx, cache, mask)
                         : masked_forward(p, orig, cache, mask);
    tape.backward(sub(select_item(logits, 2), select_item(logits, 5)));
    return mask.weights.grad();
  };
  const std::vector<float> fast = grads_via(true);
  const std::vector<float> general = grads_via(false);
  for (std::size_t i = 0; i < fast.size(); ++i) {
    CHECK(std::abs(fast[i] - general[i]) <
          1e-3f * std::max(1.0f, std::abs(general[i])));
  }
}

TEST_CASE("mask files round-trip and validate") {
  ModelConfig c = small_config();
  Mask mask = Mask::ones(c);
  std::mt19937 rng(97);
  std::uniform_real_distribution<float> udist(0.0f, 1.0f);
  for (float& w : mask.weights.mutable_data()) w = udist(rng);

  const std::string path = "cseek_test_mask_" + std::to_string(getpid()) + ".json";
  save_mask(mask, "deadbeef00000000", 0.5f, path);
  std::string hash;
  Mask loaded = load_mask(path, c, &hash);
  CHECK(hash == "deadbeef00000000");
  CHECK(loaded.weights.data() == mask.weights.data());

  BinaryMask binary;
  binary.patched = {c.n_heads > 1 ? ComponentId{0, ComponentKind::AttentionHead, 1}
                                  : ComponentId{0, ComponentKind::AttentionHead, 0}};
  save_binary_mask(binary, c, "deadbeef00000000", 0.5f, path);
  BinaryMask bload = load_binary_mask(path, c);
  CHECK(bload.patched == binary.patched);

  // a model with more components must reject the file
  ModelConfig bigger = c;
  bigger.n_layers = 3;
  CHECK_THROWS_AS(load_mask(path, bigger, nullptr), FormatError);
  std::remove(path.c_str());
}
