#include "cseek/patching.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cseek {

using nlohmann::json;

// ---- mask --------------------------------------------------------------

Mask Mask::filled(const ModelConfig& config, float w) {
  Mask m;
  m.components = enumerate_components(config);
  m.weights = Tensor::full({static_cast<int>(m.components.size())}, w);
  return m;
}

int Mask::index_of(const ComponentId& c) const {
  for (std::size_t i = 0; i < components.size(); ++i) {
    if (components[i] == c) return static_cast<int>(i);
  }
  return -1;
}

float Mask::weight(const ComponentId& c) const {
  const int i = index_of(c);
  if (i < 0) throw ContractError("mask: unknown component " + c.str());
  return weights.data()[static_cast<std::size_t>(i)];
}

void Mask::set_weight(const ComponentId& c, float w) {
  const int i = index_of(c);
  if (i < 0) throw ContractError("mask: unknown component " + c.str());
  weights.mutable_data()[static_cast<std::size_t>(i)] = w;
}

void Mask::clamp01() {
  for (float& w : weights.mutable_data()) w = std::clamp(w, 0.0f, 1.0f);
}

int Mask::count_below(float threshold) const {
  int n = 0;
  for (float w : weights.data()) n += (w < threshold) ? 1 : 0;
  return n;
}

BinaryMask round_mask(const Mask& mask, float threshold) {
  if (!(threshold > 0.0f && threshold < 1.0f)) {
    throw ContractError("round_mask: threshold must lie in (0,1)");
  }
  BinaryMask b;
  b.positions = mask.positions;
  for (std::size_t i = 0; i < mask.components.size(); ++i) {
    if (mask.weights.data()[i] < threshold) b.patched.insert(mask.components[i]);
  }
  return b;
}

// ---- alternate cache -----------------------------------------------------

AlternateCache cache_alternate(const ModelParams& params, const std::vector<int>& alt_tokens,
                               const std::vector<int>& positions) {
  for (int p : positions) {
    if (p < 0 || p >= static_cast<int>(alt_tokens.size())) {
      throw AlignmentError("cache_alternate: position " + std::to_string(p) +
                           " outside alternate sequence of length " +
                           std::to_string(alt_tokens.size()));
    }
  }
  ForwardTrace trace = forward_traced(params, alt_tokens, positions);
  AlternateCache cache;
  cache.alt_tokens = alt_tokens;
  cache.positions = positions;
  cache.values = std::move(trace.contributions);
  const int seq_len = static_cast<int>(alt_tokens.size());
  const int v = trace.logits.dim(1);
  cache.alt_final_logits.assign(
      trace.logits.data().begin() + static_cast<std::ptrdiff_t>(seq_len - 1) * v,
      trace.logits.data().begin() + static_cast<std::ptrdiff_t>(seq_len) * v);
  return cache;
}

// ---- masked forward --------------------------------------------------------

namespace {

std::vector<int> resolve_positions(const std::vector<int>& mask_positions, int seq_len) {
  if (mask_positions.empty()) return {seq_len - 1};
  return mask_positions;
}

void check_alignment(const std::vector<int>& orig, const AlternateCache& cache,
                     const std::vector<int>& positions) {
  if (orig.size() != cache.alt_tokens.size()) {
    throw AlignmentError("masked_forward: original length " + std::to_string(orig.size()) +
                         " vs alternate length " + std::to_string(cache.alt_tokens.size()));
  }
  for (int p : positions) {
    if (std::find(cache.positions.begin(), cache.positions.end(), p) ==
        cache.positions.end()) {
      throw AlignmentError("masked_forward: position " + std::to_string(p) +
                           " not covered by the alternate cache");
    }
    if (orig[static_cast<std::size_t>(p)] != cache.alt_tokens[static_cast<std::size_t>(p)]) {
      throw AlignmentError("masked_forward: original and alternate tokens differ at patched "
                           "position " + std::to_string(p));
    }
  }
}

void check_weights(const Mask& mask) {
  for (float w : mask.weights.data()) {
    if (!(w >= 0.0f && w <= 1.0f)) {
      throw ContractError("masked_forward: mask weight " + std::to_string(w) +
                          " outside [0,1]");
    }
  }
}

// Rows of the cached alternate values for the requested positions, as a plain
// [len(positions), d] tensor.
Tensor alt_matrix(const AlternateCache& cache, const ComponentId& c,
                  const std::vector<int>& positions) {
  auto it = cache.values.find(c);
  if (it == cache.values.end()) {
    throw ContractError("masked_forward: no cached alternate value for component " + c.str());
  }
  std::vector<float> data;
  for (int p : positions) {
    const auto pos_it = std::find(cache.positions.begin(), cache.positions.end(), p);
    const std::size_t idx = static_cast<std::size_t>(pos_it - cache.positions.begin());
    const auto& row = it->second.at(idx);
    data.insert(data.end(), row.begin(), row.end());
  }
  const int d = static_cast<int>(it->second.front().size());
  return Tensor::from_data({static_cast<int>(positions.size()), d}, std::move(data));
}

}  // namespace

Tensor masked_forward(const ModelParams& params, const std::vector<int>& orig_tokens,
                      const AlternateCache& cache, const Mask& mask) {
  const int seq_len = static_cast<int>(orig_tokens.size());
  const std::vector<int> positions = resolve_positions(mask.positions, seq_len);
  check_alignment(orig_tokens, cache, positions);
  check_weights(mask);

  ContributionHook hook = [&](const ComponentId& c, const Tensor& v) -> Tensor {
    const int idx = mask.index_of(c);
    if (idx < 0) throw ContractError("masked_forward: component " + c.str() + " not in mask");
    if (cache.values.find(c) == cache.values.end()) {
      if (mask.weights.data()[static_cast<std::size_t>(idx)] < 1.0f) {
        throw ContractError("masked_forward: no cached alternate value for component " +
                            c.str());
      }
      return v;  // unpatched component may go uncached
    }
    Tensor w = select_item(mask.weights, idx);
    return blend_rows(v, positions, alt_matrix(cache, c, positions), w);
  };

  Tensor logits = forward_core(params, orig_tokens, 1, hook, nullptr);
  return select_row(logits, seq_len - 1);
}

Tensor binary_forward(const ModelParams& params, const std::vector<int>& orig_tokens,
                      const AlternateCache& cache, const BinaryMask& binary) {
  Mask mask = Mask::filled(params.config, 1.0f);
  for (const ComponentId& c : binary.patched) mask.set_weight(c, 0.0f);
  mask.positions = binary.positions;
  return masked_forward(params, orig_tokens, cache, mask);
}

// ---- final-token fast path ---------------------------------------------

OrigContext prepare_original(const ModelParams& params, const std::vector<int>& tokens) {
  const ModelConfig& cfg = params.config;
  const int seq_len = static_cast<int>(tokens.size());
  const int d = cfg.d_model, dh = cfg.d_head();

  CoreTrace trace;
  trace.capture_kv = true;
  forward_core(params, tokens, 1, nullptr, &trace);

  OrigContext ctx;
  ctx.tokens = tokens;
  {
    Tensor e = embed(params.tok_embed, {tokens.back()});
    Tensor p = embed(params.pos_embed, {seq_len - 1});
    ctx.x_final = add(e, p);
  }
  ctx.k_prefix.resize(static_cast<std::size_t>(cfg.n_layers));
  ctx.v_prefix.resize(static_cast<std::size_t>(cfg.n_layers));
  ctx.wo_head.resize(static_cast<std::size_t>(cfg.n_layers));
  std::vector<int> head_rows(static_cast<std::size_t>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Tensor& k = trace.k_layers[static_cast<std::size_t>(l)];
    const Tensor& v = trace.v_layers[static_cast<std::size_t>(l)];
    for (int h = 0; h < cfg.n_heads; ++h) {
      // rows 0..T-2 are unaffected by final-token patching
      std::vector<float> kp, vp;
      kp.reserve(static_cast<std::size_t>(seq_len - 1) * dh);
      vp.reserve(static_cast<std::size_t>(seq_len - 1) * dh);
      for (int r = 0; r < seq_len - 1; ++r) {
        for (int c = 0; c < dh; ++c) {
          kp.push_back(k.data()[static_cast<std::size_t>(r) * d + h * dh + c]);
          vp.push_back(v.data()[static_cast<std::size_t>(r) * d + h * dh + c]);
        }
      }
      ctx.k_prefix[static_cast<std::size_t>(l)].push_back(
          Tensor::from_data({seq_len - 1, dh}, std::move(kp)));
      ctx.v_prefix[static_cast<std::size_t>(l)].push_back(
          Tensor::from_data({seq_len - 1, dh}, std::move(vp)));
      std::iota(head_rows.begin(), head_rows.end(), h * dh);
      ctx.wo_head[static_cast<std::size_t>(l)].push_back(
          gather_rows(params.layers[static_cast<std::size_t>(l)].wo, head_rows));
    }
  }
  return ctx;
}

Tensor masked_forward_final(const ModelParams& params, const OrigContext& ctx,
                            const AlternateCache& cache, const Mask& mask) {
  const ModelConfig& cfg = params.config;
  const int seq_len = static_cast<int>(ctx.tokens.size());
  const std::vector<int> positions = resolve_positions(mask.positions, seq_len);
  if (positions.size() != 1 || positions[0] != seq_len - 1) {
    throw ContractError("masked_forward_final: supports final-token patching only");
  }
  check_alignment(ctx.tokens, cache, positions);
  check_weights(mask);

  const int dh = cfg.d_head();
  const float score_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const std::vector<int> final_row{0};

  auto patch = [&](const ComponentId& c, Tensor contrib) -> Tensor {
    const int idx = mask.index_of(c);
    if (idx < 0) throw ContractError("masked_forward: component " + c.str() + " not in mask");
    if (cache.values.find(c) == cache.values.end()) {
      if (mask.weights.data()[static_cast<std::size_t>(idx)] < 1.0f) {
        throw ContractError("masked_forward: no cached alternate value for component " +
                            c.str());
      }
      return contrib;
    }
    Tensor w = select_item(mask.weights, idx);
    return blend_rows(contrib, final_row, alt_matrix(cache, c, positions), w);
  };

  Tensor x = ctx.x_final;  // [1, d]
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& layer = params.layers[static_cast<std::size_t>(l)];
    Tensor xn = rmsnorm(x, layer.rms1_gain, kRmsEps);
    Tensor q = matmul(xn, layer.wq);
    Tensor k = matmul(xn, layer.wk);
    Tensor v = matmul(xn, layer.wv);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, dh);
      Tensor kh = slice_cols(k, h * dh, dh);
      Tensor vh = slice_cols(v, h * dh, dh);
      Tensor keys = concat_rows(ctx.k_prefix[static_cast<std::size_t>(l)][h], kh);
      Tensor vals = concat_rows(ctx.v_prefix[static_cast<std::size_t>(l)][h], vh);
      Tensor probs = softmax_lastdim(scale(matmul(qh, transpose(keys)), score_scale));
      Tensor contrib = matmul(matmul(probs, vals), ctx.wo_head[static_cast<std::size_t>(l)][h]);
      contrib = patch(ComponentId{l, ComponentKind::AttentionHead, h}, contrib);
      x = add(x, contrib);
    }
    Tensor xn2 = rmsnorm(x, layer.rms2_gain, kRmsEps);
    Tensor gated = mul(silu(matmul(xn2, layer.w_gate)), matmul(xn2, layer.w_up));
    Tensor mlp_out = matmul(gated, layer.w_down);
    mlp_out = patch(ComponentId{l, ComponentKind::Mlp, -1}, mlp_out);
    x = add(x, mlp_out);
  }
  Tensor xf = rmsnorm(x, params.final_gain, kRmsEps);
  return select_row(matmul(xf, params.unembed), 0);
}

// ---- mask json io --------------------------------------------------------

namespace {

json mask_entries_json(const std::vector<ComponentId>& components,
                       const std::vector<float>& weights) {
  json entries = json::array();
  for (std::size_t i = 0; i < components.size(); ++i) {
    json e;
    e["layer"] = components[i].layer;
    if (components[i].kind == ComponentKind::Mlp) {
      e["kind"] = "mlp";
    } else {
      e["kind"] = "attention-head";
      e["head"] = components[i].head;
    }
    e["weight"] = weights[i];
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_mask_file(const json& doc, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("save_mask: cannot open " + path);
  f << doc.dump(2) << "\n";
}

json read_json_file(const std::string& path, const char* what) {
  std::ifstream f(path);
  if (!f) throw Error(std::string(what) + ": cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": parse error in " + path + ": " + e.what());
  }
}

ComponentId entry_component(const json& e) {
  ComponentId c;
  c.layer = e.at("layer").get<int>();
  const std::string kind = e.at("kind").get<std::string>();
  if (kind == "mlp") {
    c.kind = ComponentKind::Mlp;
    c.head = -1;
  } else if (kind == "attention-head") {
    c.kind = ComponentKind::AttentionHead;
    c.head = e.at("head").get<int>();
  } else {
    throw FormatError("mask file: unknown component kind '" + kind + "'");
  }
  return c;
}

}  // namespace

void save_mask(const Mask& mask, const std::string& config_hash, float threshold,
               const std::string& path) {
  json doc;
  doc["config-hash"] = config_hash;
  doc["threshold"] = threshold;
  doc["entries"] = mask_entries_json(mask.components, mask.weights.data());
  write_mask_file(doc, path);
}

Mask load_mask(const std::string& path, const ModelConfig& config,
               std::string* config_hash_out) {
  const json doc = read_json_file(path, "load_mask");
  Mask mask = Mask::filled(config, 1.0f);
  std::vector<bool> seen(mask.components.size(), false);
  for (const auto& e : doc.at("entries")) {
    const ComponentId c = entry_component(e);
    const int idx = mask.index_of(c);
    if (idx < 0) {
      throw FormatError("mask file: component " + c.str() + " not in model of " +
                        std::to_string(mask.components.size()) + " components");
    }
    if (seen[static_cast<std::size_t>(idx)]) {
      throw FormatError("mask file: duplicate entry for component " + c.str());
    }
    seen[static_cast<std::size_t>(idx)] = true;
    const float w = e.at("weight").get<float>();
    if (!(w >= 0.0f && w <= 1.0f)) {
      throw FormatError("mask file: weight for " + c.str() + " outside [0,1]");
    }
    mask.weights.mutable_data()[static_cast<std::size_t>(idx)] = w;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) {
      throw FormatError("mask file: missing entry for component " + mask.components[i].str());
    }
  }
  if (config_hash_out) *config_hash_out = doc.at("config-hash").get<std::string>();
  return mask;
}

void save_binary_mask(const BinaryMask& binary, const ModelConfig& config,
                      const std::string& config_hash, float threshold,
                      const std::string& path) {
  const std::vector<ComponentId> components = enumerate_components(config);
  std::vector<float> weights(components.size(), 1.0f);
  for (std::size_t i = 0; i < components.size(); ++i) {
    if (binary.patched.count(components[i])) weights[i] = 0.0f;
  }
  json doc;
  doc["config-hash"] = config_hash;
  doc["threshold"] = threshold;
  doc["entries"] = mask_entries_json(components, weights);
  write_mask_file(doc, path);
}

BinaryMask load_binary_mask(const std::string& path, const ModelConfig& config,
                            std::string* config_hash_out) {
  std::string hash;
  const Mask mask = load_mask(path, config, &hash);
  BinaryMask b;
  for (std::size_t i = 0; i < mask.components.size(); ++i) {
    const float w = mask.weights.data()[i];
    if (w == 0.0f) {
      b.patched.insert(mask.components[i]);
    } else if (w != 1.0f) {
      throw FormatError("binary mask file: weight for " + mask.components[i].str() +
                        " is neither 0 nor 1");
    }
  }
  if (config_hash_out) *config_hash_out = hash;
  return b;
}

}  // namespace cseek
