#include "cseek/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace cseek {

using nlohmann::json;

// ---- config ------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0 || vocab_size <= 0 ||
      max_seq_len <= 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

json ModelConfig::to_json() const {
  return json{{"n_layers", n_layers},     {"n_heads", n_heads},
              {"d_model", d_model},       {"d_mlp", d_mlp},
              {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<unsigned>();
  c.validate();
  return c;
}

std::string ModelConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

std::string ComponentId::str() const {
  if (kind == ComponentKind::Mlp) return "mlp" + std::to_string(layer);
  return "h" + std::to_string(layer) + "." + std::to_string(head);
}

// ---- params ------------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_embed", tok_embed);
  out.emplace_back("pos_embed", pos_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "wq", layers[l].wq);
    out.emplace_back(p + "wk", layers[l].wk);
    out.emplace_back(p + "wv", layers[l].wv);
    out.emplace_back(p + "wo", layers[l].wo);
    out.emplace_back(p + "w_up", layers[l].w_up);
    out.emplace_back(p + "w_gate", layers[l].w_gate);
    out.emplace_back(p + "w_down", layers[l].w_down);
    out.emplace_back(p + "rms1_gain", layers[l].rms1_gain);
    out.emplace_back(p + "rms2_gain", layers[l].rms2_gain);
  }
  out.emplace_back("final_gain", final_gain);
  out.emplace_back("unembed", unembed);
  return out;
}

std::vector<Tensor> ModelParams::all_tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

void ModelParams::set_trainable(bool trainable) {
  for (Tensor& t : all_tensors()) {
    if (trainable) {
      t.enable_grad();
    } else {
      t.disable_grad();
    }
  }
}

ModelParams ModelParams::clone() const {
  auto copy = [](const Tensor& t) { return Tensor::from_data(t.shape(), t.data()); };
  ModelParams p;
  p.config = config;
  p.tok_embed = copy(tok_embed);
  p.pos_embed = copy(pos_embed);
  for (const LayerParams& l : layers) {
    p.layers.push_back({copy(l.wq), copy(l.wk), copy(l.wv), copy(l.wo), copy(l.w_up),
                        copy(l.w_gate), copy(l.w_down), copy(l.rms1_gain), copy(l.rms2_gain)});
  }
  p.final_gain = copy(final_gain);
  p.unembed = copy(unembed);
  return p;
}

std::vector<ComponentId> enumerate_components(const ModelConfig& config) {
  config.validate();
  std::vector<ComponentId> out;
  out.reserve(static_cast<std::size_t>(config.n_layers) * (config.n_heads + 1));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) {
      out.push_back({l, ComponentKind::AttentionHead, h});
    }
    out.push_back({l, ComponentKind::Mlp, -1});
  }
  return out;
}

ModelParams init_params(const ModelConfig& config, unsigned seed) {
  config.validate();
  std::mt19937 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  const float base_std = 0.02f;
  const float out_std = base_std / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  auto normal = [&](std::vector<int> shape, float std_dev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.mutable_data()) v = dist(rng) * std_dev;
    return t;
  };

  ModelParams p;
  p.config = config;
  const int d = config.d_model, dm = config.d_mlp;
  p.tok_embed = normal({config.vocab_size, d}, base_std);
  p.pos_embed = normal({config.max_seq_len, d}, base_std);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.wq = normal({d, d}, base_std);
    layer.wk = normal({d, d}, base_std);
    layer.wv = normal({d, d}, base_std);
    layer.wo = normal({d, d}, out_std);
    layer.w_up = normal({d, dm}, base_std);
    layer.w_gate = normal({d, dm}, base_std);
    layer.w_down = normal({dm, d}, out_std);
    layer.rms1_gain = Tensor::full({d}, 1.0f);
    layer.rms2_gain = Tensor::full({d}, 1.0f);
  }
  p.final_gain = Tensor::full({d}, 1.0f);
  p.unembed = normal({d, config.vocab_size}, base_std);
  return p;
}

void zero_output_projections(ModelParams& params) {
  for (auto& layer : params.layers) {
    std::fill(layer.wo.mutable_data().begin(), layer.wo.mutable_data().end(), 0.0f);
    std::fill(layer.w_down.mutable_data().begin(), layer.w_down.mutable_data().end(), 0.0f);
  }
}

// ---- forward -----------------------------------------------------------

Tensor forward_core(const ModelParams& params, const std::vector<int>& ids, int n_seqs,
                    const ContributionHook& hook, CoreTrace* trace) {
  const ModelConfig& cfg = params.config;
  if (n_seqs <= 0 || ids.empty() || ids.size() % static_cast<std::size_t>(n_seqs) != 0) {
    throw ContractError("forward: token count not divisible into sequences");
  }
  const int seq_len = static_cast<int>(ids.size()) / n_seqs;
  if (seq_len > cfg.max_seq_len) {
    throw ContractError("forward: sequence length " + std::to_string(seq_len) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  const int d = cfg.d_model, dh = cfg.d_head();

  std::vector<int> pos_ids(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos_ids[i] = static_cast<int>(i) % seq_len;

  auto record_rows = [&](const Tensor& m, std::vector<std::vector<float>>& dst) {
    for (int row : trace->rows) {
      const float* src = m.data().data() + static_cast<std::size_t>(row) * m.dim(1);
      dst.emplace_back(src, src + m.dim(1));
    }
  };

  Tensor x = add(embed(params.tok_embed, ids), embed(params.pos_embed, pos_ids));
  if (trace) record_rows(x, trace->embed_plus_pos);

  std::vector<int> head_rows(static_cast<std::size_t>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& layer = params.layers[static_cast<std::size_t>(l)];
    Tensor xn = rmsnorm(x, layer.rms1_gain, kRmsEps);
    Tensor q = matmul(xn, layer.wq);
    Tensor k = matmul(xn, layer.wk);
    Tensor v = matmul(xn, layer.wv);
    if (trace && trace->capture_kv) {
      trace->k_layers.push_back(k);
      trace->v_layers.push_back(v);
    }
    if (!hook && !trace && n_seqs > 1) {
      // fused head path for training batches; per-head writes are needed
      // only when recording or patching contributions
      Tensor attn = causal_attention_heads(q, k, v, n_seqs, cfg.n_heads);
      x = add(x, matmul(attn, layer.wo));
    } else {
      for (int h = 0; h < cfg.n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor oh = causal_attention(qh, kh, vh, n_seqs);
        std::iota(head_rows.begin(), head_rows.end(), h * dh);
        Tensor contrib = matmul(oh, gather_rows(layer.wo, head_rows));
        const ComponentId cid{l, ComponentKind::AttentionHead, h};
        if (hook) contrib = hook(cid, contrib);
        if (trace) record_rows(contrib, trace->contributions[cid]);
        x = add(x, contrib);
      }
    }
    Tensor xn2 = rmsnorm(x, layer.rms2_gain, kRmsEps);
    Tensor gated = mul(silu(matmul(xn2, layer.w_gate)), matmul(xn2, layer.w_up));
    Tensor mlp_out = matmul(gated, layer.w_down);
    const ComponentId mid{l, ComponentKind::Mlp, -1};
    if (hook) mlp_out = hook(mid, mlp_out);
    if (trace) record_rows(mlp_out, trace->contributions[mid]);
    x = add(x, mlp_out);
  }
  if (trace) record_rows(x, trace->resid_pre_final);
  Tensor xf = rmsnorm(x, params.final_gain, kRmsEps);
  return matmul(xf, params.unembed);
}

Tensor forward(const ModelParams& params, const std::vector<int>& tokens) {
  return forward_core(params, tokens, 1, nullptr, nullptr);
}

Tensor forward_batched(const ModelParams& params, const std::vector<int>& ids, int n_seqs) {
  return forward_core(params, ids, n_seqs, nullptr, nullptr);
}

ForwardTrace forward_traced(const ModelParams& params, const std::vector<int>& tokens,
                            const std::vector<int>& record_positions) {
  const int seq_len = static_cast<int>(tokens.size());
  for (int p : record_positions) {
    if (p < 0 || p >= seq_len) {
      throw IndexError("forward_traced: record position " + std::to_string(p) +
                       " outside sequence of length " + std::to_string(seq_len));
    }
  }
  CoreTrace core;
  core.rows = record_positions;
  Tensor logits = forward_core(params, tokens, 1, nullptr, &core);
  ForwardTrace trace;
  trace.logits = logits;
  trace.positions = record_positions;
  trace.contributions = std::move(core.contributions);
  trace.embed_plus_pos = std::move(core.embed_plus_pos);
  trace.resid_pre_final = std::move(core.resid_pre_final);
  return trace;
}

// ---- checkpoint io -------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'C', 'S', 'E', 'E', 'K', '0', '0', '1'};
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  const auto named = params.named_tensors();
  json manifest;
  manifest["config"] = params.config.to_json();
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : named) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(float);
  }
  manifest["params"] = entries;
  const std::string mtext = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  const std::uint32_t mlen = static_cast<std::uint32_t>(mtext.size());
  f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [name, t] : named) {
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!f) throw Error("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint32_t)) {
    throw FormatError("checkpoint truncated at offset " + std::to_string(bytes.size()) +
                      ": header incomplete");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0");
  }
  std::uint32_t mlen = 0;
  std::memcpy(&mlen, bytes.data() + sizeof(kMagic), sizeof(mlen));
  const std::size_t header = sizeof(kMagic) + sizeof(std::uint32_t);
  if (bytes.size() < header + mlen) {
    throw FormatError("checkpoint truncated at offset " + std::to_string(bytes.size()) +
                      ": manifest extends to " + std::to_string(header + mlen));
  }
  json manifest;
  try {
    manifest = json::parse(bytes.substr(header, mlen));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: manifest parse error at offset " + std::to_string(header) +
                      ": " + e.what());
  }

  ModelConfig config;
  try {
    config = ModelConfig::from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config in manifest: ") + e.what());
  }
  ModelParams params = init_params(config, config.seed);

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : params.named_tensors()) by_name.emplace(name, t);

  const std::size_t data_start = header + mlen;
  const std::size_t data_size = bytes.size() - data_start;
  std::size_t loaded = 0;
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("checkpoint: config mismatch, unexpected parameter '" + name + "'");
    }
    Tensor t = it->second;
    if (t.shape() != shape) {
      throw FormatError("checkpoint: config mismatch for '" + name + "'");
    }
    const std::size_t nbytes = t.numel() * sizeof(float);
    if (offset + nbytes > data_size) {
      throw FormatError("checkpoint truncated at offset " +
                        std::to_string(data_start + data_size) + ": parameter '" + name +
                        "' needs bytes up to " + std::to_string(data_start + offset + nbytes));
    }
    std::memcpy(t.mutable_data().data(), bytes.data() + data_start + offset, nbytes);
    ++loaded;
  }
  if (loaded != by_name.size()) {
    throw FormatError("checkpoint: config mismatch, expected " +
                      std::to_string(by_name.size()) + " parameters, manifest lists " +
                      std::to_string(loaded));
  }
  return params;
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected) {
  ModelParams params = load_checkpoint(path);
  if (!(params.config == expected)) {
    throw FormatError("checkpoint: config mismatch, file built for " +
                      params.config.to_json().dump() + " but expected " +
                      expected.to_json().dump());
  }
  return params;
}

}  // namespace cseek
