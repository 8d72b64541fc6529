#pragma once

#include <compare>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cseek/tensor.hpp"
#include "json.hpp"

namespace cseek {

inline constexpr float kRmsEps = 1e-5f;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 8;
  int d_model = 128;
  int d_mlp = 512;
  int vocab_size = 18;
  int max_seq_len = 14;
  unsigned seed = 0;

  int d_head() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;  // stable fingerprint embedded in artifacts

  bool operator==(const ModelConfig&) const = default;
};

enum class ComponentKind { AttentionHead = 0, Mlp = 1 };

// Addressable model component: one attention head or one MLP block.
struct ComponentId {
  int layer = 0;
  ComponentKind kind = ComponentKind::AttentionHead;
  int head = -1;  // -1 for MLP

  auto operator<=>(const ComponentId&) const = default;
  std::string str() const;
};

struct LayerParams {
  Tensor wq, wk, wv, wo;          // [d, d]
  Tensor w_up, w_gate;            // [d, d_mlp]
  Tensor w_down;                  // [d_mlp, d]
  Tensor rms1_gain, rms2_gain;    // [d]
};

struct ModelParams {
  ModelConfig config;
  Tensor tok_embed;   // [V, d]
  Tensor pos_embed;   // [T_max, d]
  std::vector<LayerParams> layers;
  Tensor final_gain;  // [d]
  Tensor unembed;     // [d, V]

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> all_tensors() const;
  void set_trainable(bool trainable);
  ModelParams clone() const;  // deep copy (fresh buffers)
};

// Layer-major component order, heads before the MLP within each layer.
std::vector<ComponentId> enumerate_components(const ModelConfig& config);

// Scaled normal init (std 0.02; output projections scaled by 1/sqrt(2*n_layers)),
// gains at one. Deterministic for a given seed.
ModelParams init_params(const ModelConfig& config, unsigned seed);

// Test helper: zero every residual write (W_O and down-projections).
void zero_output_projections(ModelParams& params);

// Full causal decoder pass; returns logits [T, V].
Tensor forward(const ModelParams& params, const std::vector<int>& tokens);

// Batched variant over n_seqs equal-length sequences; logits [n_seqs*T, V].
Tensor forward_batched(const ModelParams& params, const std::vector<int>& ids, int n_seqs);

// Per-position record of each component's additive write into the residual
// stream, plus the surrounding residual state needed to check additivity.
struct ForwardTrace {
  Tensor logits;                                     // [T, V]
  std::vector<int> positions;
  std::map<ComponentId, std::vector<std::vector<float>>> contributions;
  std::vector<std::vector<float>> embed_plus_pos;    // per recorded position
  std::vector<std::vector<float>> resid_pre_final;   // before the final norm
};

ForwardTrace forward_traced(const ModelParams& params, const std::vector<int>& tokens,
                            const std::vector<int>& record_positions);

// Hook invoked with each component's freshly computed residual write
// [n_seqs*T, d]; the returned tensor is added to the stream instead.
using ContributionHook = std::function<Tensor(const ComponentId&, const Tensor&)>;

struct CoreTrace {
  std::vector<int> rows;  // absolute row indices to record
  std::map<ComponentId, std::vector<std::vector<float>>> contributions;
  std::vector<std::vector<float>> embed_plus_pos;
  std::vector<std::vector<float>> resid_pre_final;
  bool capture_kv = false;
  std::vector<Tensor> k_layers, v_layers;  // per layer [n_seqs*T, d] projections
};

Tensor forward_core(const ModelParams& params, const std::vector<int>& ids, int n_seqs,
                    const ContributionHook& hook, CoreTrace* trace);

// Checkpoint file: 8-byte magic "CSEEK001", u32 little-endian manifest length,
// UTF-8 JSON manifest (config + named entries with shape and byte offset into
// the data region), then raw little-endian float32 arrays.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);
ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace cseek
