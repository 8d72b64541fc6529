#pragma once

#include <set>
#include <string>
#include <vector>

#include "cseek/model.hpp"

namespace cseek {

// Learnable patch mask: one weight in [0,1] per enumerated component.
// w=1 leaves the component alone, w=0 fully substitutes the cached alternate
// value, in between takes the convex combination. Positions empty means
// "final token only".
struct Mask {
  std::vector<ComponentId> components;
  Tensor weights;              // [N], aligned with components
  std::vector<int> positions;

  static Mask filled(const ModelConfig& config, float w);
  static Mask ones(const ModelConfig& config) { return filled(config, 1.0f); }

  int index_of(const ComponentId& c) const;
  float weight(const ComponentId& c) const;
  void set_weight(const ComponentId& c, float w);
  void clamp01();
  int count_below(float threshold) const;
};

// Rounded mask: the patched set holds the components with w=0.
struct BinaryMask {
  std::set<ComponentId> patched;
  std::vector<int> positions;
};

// Per-tuple cache of the alternate run: each component's residual write at
// every patchable position, captured from a clean (unpatched) pass.
struct AlternateCache {
  std::vector<int> alt_tokens;
  std::vector<int> positions;
  std::map<ComponentId, std::vector<std::vector<float>>> values;  // [component][pos][d]
  std::vector<float> alt_final_logits;
};

AlternateCache cache_alternate(const ModelParams& params, const std::vector<int>& alt_tokens,
                               const std::vector<int>& positions);

// Masked forward pass over the original tokens: at each patched position every
// component's fresh write v is replaced by w*v + (1-w)*v_a before entering the
// residual stream, so later components consume the intervened stream.
// Returns the final-position logits [V]; gradients flow to the mask weights.
Tensor masked_forward(const ModelParams& params, const std::vector<int>& orig_tokens,
                      const AlternateCache& cache, const Mask& mask);

BinaryMask round_mask(const Mask& mask, float threshold);

Tensor binary_forward(const ModelParams& params, const std::vector<int>& orig_tokens,
                      const AlternateCache& cache, const BinaryMask& binary);

// Precomputed clean-run state for the final-token fast path: keys/values of
// all non-final positions never change under final-token patching, so they are
// computed once per tuple. Only valid while params stay frozen.
struct OrigContext {
  std::vector<int> tokens;
  Tensor x_final;                              // [1, d] embedding + position at T-1
  std::vector<std::vector<Tensor>> k_prefix;   // [layer][head] -> [T-1, d_head]
  std::vector<std::vector<Tensor>> v_prefix;
  std::vector<std::vector<Tensor>> wo_head;    // [layer][head] -> [d_head, d]
};

OrigContext prepare_original(const ModelParams& params, const std::vector<int>& tokens);

// Equivalent to masked_forward for final-token-only masks, at ~1/T the cost.
Tensor masked_forward_final(const ModelParams& params, const OrigContext& ctx,
                            const AlternateCache& cache, const Mask& mask);

// Mask file: JSON {config-hash, threshold, entries:[{layer, kind, head?, weight}]}.
// Binary masks use the same schema with weights in {0,1}.
void save_mask(const Mask& mask, const std::string& config_hash, float threshold,
               const std::string& path);
Mask load_mask(const std::string& path, const ModelConfig& config,
               std::string* config_hash_out = nullptr);
void save_binary_mask(const BinaryMask& binary, const ModelConfig& config,
                      const std::string& config_hash, float threshold,
                      const std::string& path);
BinaryMask load_binary_mask(const std::string& path, const ModelConfig& config,
                            std::string* config_hash_out = nullptr);

}  // namespace cseek
