#pragma once

#include <vector>

#include "attnalign/model.hpp"

namespace attnalign {

struct TransformerConfig {
  int layers = 2;
  int heads = 2;
  int d_model = 32;
  int d_ff = 64;
  int max_len = 64;
  // Layers whose [CLS]->object attention participates in alignment; empty
  // means all of them.
  std::vector<int> align_layers;
};

struct TransformerLayerParams {
  Tensor w_q, w_k, w_v, w_o;      // [d x d]
  Tensor ff1;                     // [d x d_ff]
  Tensor ff2;                     // [d_ff x d]
  Tensor ln1_gamma, ln1_beta;     // [d]
  Tensor ln2_gamma, ln2_beta;     // [d]
};

struct TransformerParams {
  TransformerConfig cfg;
  Tensor token_embed;   // [vocab x d]
  Tensor visual_proj;   // [16 x d]
  Tensor pos_embed;     // [max_len x d]; all visual tokens share one row
  Tensor seg_embed;     // [2 x d]: text vs visual
  std::vector<TransformerLayerParams> layers;
  Tensor cls_w;         // [d x 1]
};

// Per-layer [CLS]->object attention, renormalized over the objects.
struct LayerAttentionStack {
  Tensor rows;  // [L x N], each row sums to 1

  explicit LayerAttentionStack(Tensor r);
  int layers() const { return rows.shape[0]; }
};

TransformerParams make_transformer_params(const TransformerConfig& cfg);
std::vector<NamedParam> named_params(TransformerParams& p);
void init_params(TransformerParams& p, SplitMix64& rng);

struct TransformerLayerNodes {
  Value w_q, w_k, w_v, w_o, ff1, ff2, ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};
struct TransformerNodes {
  Value token_embed, visual_proj, pos_embed, seg_embed, cls_w;
  std::vector<TransformerLayerNodes> layers;
};

TransformerNodes register_params(Tape& tape, const TransformerParams& p);
TransformerNodes nodes_from_values(const TransformerConfig& cfg,
                                   const std::vector<Value>& values);

// [CLS] ++ query ++ [SEP] ++ candidate ++ [SEP] ++ visual ++ [END], summed
// with position and segment embeddings.
struct BuiltSequence {
  Value embedded;                   // [S x d]
  std::vector<int> visual_positions;  // always contiguous
};
BuiltSequence build_sequence(Tape& tape, const TransformerConfig& cfg,
                             const TransformerNodes& nodes,
                             const std::vector<int>& query_tokens,
                             const std::vector<int>& candidate_tokens,
                             const Instance& inst);

// softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated and projected.
struct AttentionOut {
  Value output;                 // [S x d]
  std::vector<Value> head_probs;  // one [S x S] row-stochastic matrix per head
};
AttentionOut multi_head_self_attention(Tape& tape, Value x,
                                       const TransformerLayerNodes& layer, int heads);

// Head-average each layer's attention, take the [CLS] row restricted to the
// visual positions and renormalize. One [N] row per layer.
std::vector<Value> extract_cls_visual_attention(Tape& tape,
                                                const std::vector<std::vector<Value>>& per_layer_probs,
                                                const std::vector<int>& visual_positions);

struct TransformerForward {
  Value logit;                 // scalar
  std::vector<Value> stack;    // L rows of [N]
};
TransformerForward transformer_forward(Tape& tape, const TransformerConfig& cfg,
                                       const TransformerNodes& nodes, const Instance& inst,
                                       const std::vector<int>& query_tokens,
                                       const std::vector<int>& candidate_tokens);

// Mean over layers of the per-layer similarity (the spec's layer-wise
// alignment); plain-value counterpart for diagnostics.
double layerwise_dot(const LayerAttentionStack& a, const LayerAttentionStack& b);

Value build_instance_loss(Tape& tape, const TransformerConfig& cfg,
                          const TransformerNodes& nodes, const Instance& inst,
                          const AlignConfig& align_cfg, double* l_qa, double* l_qar,
                          double* l_align);

class TransformerModel : public Model {
 public:
  explicit TransformerModel(const TransformerConfig& cfg = TransformerConfig{})
      : params_(make_transformer_params(cfg)) {}

  std::string variant() const override { return "transformer"; }
  std::vector<NamedParam> params() override { return named_params(params_); }
  void init(SplitMix64& rng) override { init_params(params_, rng); }
  InstanceOutputs eval_instance(const Instance& inst) const override;
  BatchGradients batch_gradients(const std::vector<const Instance*>& batch,
                                 const AlignConfig& cfg) const override;
  nlohmann::json config_json() const override;

  TransformerParams& raw() { return params_; }
  const TransformerParams& raw() const { return params_; }

 private:
  TransformerParams params_;
};

}  // namespace attnalign
