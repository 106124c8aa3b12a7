#pragma once

#include "attnalign/tensor.hpp"

namespace attnalign {

// A probability distribution over one instance's objects.
struct AttentionMap {
  Tensor weights;  // rank 1, nonnegative, sums to 1

  explicit AttentionMap(Tensor w);
  int size() const { return weights.shape[0]; }
};

// Weights of the two-stage re-attention: every MLP here is one linear layer
// followed by leaky_relu with output width d_att.
struct ReAttentionParams {
  Tensor token_query_w;  // [d_token x d_att], queries Eq-style token features
  Tensor object_key_w;   // [d_obj x d_att]
  Tensor seq_query_w;    // [d_state x d_att], queries the final hidden state
  Tensor state_key_w;    // [d_state x d_att]
};

// Tape-side handles mirroring ReAttentionParams.
struct ReAttentionNodes {
  Value token_query_w;
  Value object_key_w;
  Value seq_query_w;
  Value state_key_w;
};

// Row i is the softmax over objects of MLP(t_i)^T MLP(o_j). [M x N], every
// row sums to 1.
Value object_wise_attention(Tape& tape, Value token_feats, Value object_feats,
                            const ReAttentionNodes& params);

// Softmax over tokens of MLP(h_final)^T MLP(h_i). [M].
Value token_wise_attention(Tape& tape, Value hidden_states, Value final_state,
                           const ReAttentionNodes& params);

struct Aggregated {
  Value attention;  // [N], the convex mixture of per-token maps
  Value refined;    // [1 x d_obj], attention-weighted object feature
};

// c_o = sum_i tw_i * row_i(per_token_maps); refined = c_o-weighted object
// mean. Preconditions (inputs on the simplex within 1e-6) are enforced.
Aggregated aggregate(Tape& tape, Value token_weights, Value per_token_maps,
                     Value object_feats);

}  // namespace attnalign
