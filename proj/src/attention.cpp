#include "attnalign/attention.hpp"

#include <cmath>

namespace attnalign {

AttentionMap::AttentionMap(Tensor w) : weights(std::move(w)) {
  if (weights.rank() != 1 || weights.shape[0] < 1) {
    throw ContractError("attention map must be a nonempty rank-1 tensor");
  }
  double total = 0.0;
  for (double v : weights.data) {
    if (v < 0.0) throw ContractError("attention weight is negative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ContractError("attention map sums to " + std::to_string(total) + ", expected 1");
  }
}

Value object_wise_attention(Tape& tape, Value token_feats, Value object_feats,
                            const ReAttentionNodes& params) {
  const Tensor& tf = tape.val(token_feats);
  const Tensor& of = tape.val(object_feats);
  if (tf.rank() != 2 || tf.shape[0] < 1) {
    throw ContractError("object_wise_attention needs at least one token");
  }
  if (of.rank() != 2 || of.shape[0] < 1) {
    throw ContractError("object_wise_attention needs at least one object");
  }
  Value tq = tape.leaky_relu(tape.matmul(token_feats, params.token_query_w));
  Value ok = tape.leaky_relu(tape.matmul(object_feats, params.object_key_w));
  Value logits = tape.matmul(tq, tape.transpose(ok));  // [M x N]
  return tape.softmax(logits, 1);
}

Value token_wise_attention(Tape& tape, Value hidden_states, Value final_state,
                           const ReAttentionNodes& params) {
  const Tensor& hs = tape.val(hidden_states);
  if (hs.rank() != 2 || hs.shape[0] < 1) {
    throw ContractError("token_wise_attention needs at least one state");
  }
  Value q = tape.leaky_relu(tape.matmul(final_state, params.seq_query_w));  // [1 x d_att]
  Value k = tape.leaky_relu(tape.matmul(hidden_states, params.state_key_w));
  Value logits = tape.matmul(k, tape.transpose(q));  // [M x 1]
  return tape.softmax(tape.reshape(logits, {hs.shape[0]}), 0);
}

Aggregated aggregate(Tape& tape, Value token_weights, Value per_token_maps,
                     Value object_feats) {
  const Tensor& tw = tape.val(token_weights);
  const Tensor& maps = tape.val(per_token_maps);
  if (tw.rank() != 1 || maps.rank() != 2 || maps.shape[0] != tw.shape[0]) {
    throw ContractError("aggregate inputs disagree: " + tw.shape_str() + " vs " +
                        maps.shape_str());
  }
  double total = 0.0;
  for (double v : tw.data) total += v;
  if (std::abs(total - 1.0) > 1e-6) {
    throw ContractError("token weights sum to " + std::to_string(total));
  }
  for (int i = 0; i < maps.shape[0]; ++i) {
    double row = 0.0;
    for (int j = 0; j < maps.shape[1]; ++j) row += maps.at(i, j);
    if (std::abs(row - 1.0) > 1e-6) {
      throw ContractError("per-token map row " + std::to_string(i) + " sums to " +
                          std::to_string(row));
    }
  }

  Value tw_row = tape.reshape(token_weights, {1, tw.shape[0]});
  Value mixture = tape.matmul(tw_row, per_token_maps);  // [1 x N]
  Aggregated out;
  out.attention = tape.reshape(mixture, {maps.shape[1]});
  out.refined = tape.matmul(mixture, object_feats);
  return out;
}

}  // namespace attnalign
