#pragma once

#include <cstdint>
#include <vector>

#include "sacnet/feature_map.hpp"
#include "sacnet/tensor.hpp"

namespace sacnet {

struct MsaConfig {
  int64_t n_heads = 2;
  int64_t embed_dim = 8;

  int64_t head_dim() const { return embed_dim / n_heads; }
  void validate() const;
};

// Per-head projection matrices plus the output projection. No biases and no
// positional encoding, which keeps the block permutation-equivariant over
// spatial tokens.
struct MsaWeights {
  std::vector<TensorPtr> wq, wk, wv;  // each [embed_dim, head_dim]
  TensorPtr wo;                       // [embed_dim, embed_dim]
};

// uniform in +-1/sqrt(embed_dim), seeded
MsaWeights init_msa(const MsaConfig& cfg, uint64_t seed);

// Tokens are the h*w spatial positions with channels as embeddings. Per head
// softmax(Q K^T / sqrt(head_dim)) V, heads concatenated, output projected,
// residual added, then layer-normalized over channels. Output shape equals
// input shape. When attn_out is given, the per-head attention maps
// [b, tokens, tokens] are copied out for inspection.
TensorPtr msa_forward(const MsaConfig& cfg, const MsaWeights& w, const TensorPtr& input,
                      std::vector<TensorPtr>* attn_out = nullptr);

// Attention runs at a fixed width decoupled from the orientation count: a
// learnable 1x1 lift maps the incoming channels to embed_dim and a 1x1
// projection drops back afterwards.
struct MsaBlock {
  MsaConfig cfg;
  TensorPtr lift;  // [embed_dim, channels, 1, 1]
  MsaWeights msa;
  TensorPtr drop;  // [channels, embed_dim, 1, 1]
};

MsaBlock init_msa_block(int64_t channels, const MsaConfig& cfg, uint64_t seed);
FeatureMap msa_block_forward(const MsaBlock& blk, const FeatureMap& input);

}  // namespace sacnet
