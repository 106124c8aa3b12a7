#pragma once

#include <array>
#include <vector>

#include "attnalign/attention.hpp"
#include "attnalign/model.hpp"

namespace attnalign {

struct VanillaConfig {
  int d_token = 32;   // token embedding width
  int d_obj = 32;     // projected object feature width
  int d_hidden = 32;  // recurrent state width per direction
  int d_att = 32;     // re-attention projection width
};

// One direction of the gated recurrent encoder (update / reset / candidate
// gates, no biases).
struct GruParams {
  Tensor w_xz, w_xr, w_xc;  // [d_in x d_h]
  Tensor w_hz, w_hr, w_hc;  // [d_h x d_h]
};

// Everything specific to one of the two selection processes. Only the token
// embedding table and the visual projection are shared between them.
struct ProcessParams {
  GruParams fwd, bwd;
  ReAttentionParams att;
  Tensor cls_w0;  // [(2 d_h + d_obj) x d_h]
  Tensor cls_w1;  // [d_h x 1]
};

struct VanillaParams {
  VanillaConfig cfg;
  Tensor token_embed;  // [vocab x d_token]
  Tensor visual_proj;  // [16 x d_obj]
  ProcessParams qa, qar;
};

struct CandidateScore {
  double logit = 0.0;
  AttentionMap attention;
};

VanillaParams make_vanilla_params(const VanillaConfig& cfg);
std::vector<NamedParam> named_params(VanillaParams& p);
void init_params(VanillaParams& p, SplitMix64& rng);

// Tape-side structure mirroring VanillaParams; built either from parameter
// leaves or from slices of one packed leaf (see nodes_from_values).
struct GruNodes {
  Value w_xz, w_xr, w_xc, w_hz, w_hr, w_hc;
};
struct ProcessNodes {
  GruNodes fwd, bwd;
  ReAttentionNodes att;
  Value cls_w0, cls_w1;
};
struct VanillaNodes {
  Value token_embed;
  Value visual_proj;
  ProcessNodes qa, qar;
};

VanillaNodes register_params(Tape& tape, const VanillaParams& p);
// `values` must follow named_params() order.
VanillaNodes nodes_from_values(const std::vector<Value>& values);

// Per-candidate forward on the tape: embed, encode, re-attend, classify.
struct CandidateGraph {
  Value logit;      // scalar
  Value attention;  // [N]
};

// Shared per-instance context (projected objects and their mean row).
struct InstanceContext {
  Value objects_proj;      // [N x d_obj]
  Value proj_with_mean;    // [(N+1) x d_obj], last row = mean
  int n_objects = 0;
};
InstanceContext build_instance_context(Tape& tape, const VanillaNodes& nodes,
                                       const Instance& inst);

CandidateGraph score_candidate(Tape& tape, const VanillaNodes& nodes,
                               const InstanceContext& ctx, const ProcessNodes& proc,
                               const std::vector<int>& query_tokens,
                               const std::vector<int>& candidate_tokens);

// Whole-instance joint loss. Loss component values (not gradients) are
// reported through `parts` when non-null.
struct LossParts {
  double l_qa = 0.0;
  double l_qar = 0.0;
  double l_align = 0.0;
};
Value build_instance_loss(Tape& tape, const VanillaNodes& nodes, const Instance& inst,
                          const AlignConfig& cfg, LossParts* parts = nullptr);

// Forward-only convenience entry points; one CandidateScore per choice.
std::vector<CandidateScore> forward_q2a(const VanillaParams& p, const Instance& inst);
std::vector<CandidateScore> forward_qa2r(const VanillaParams& p, const Instance& inst,
                                         const std::vector<int>& answer_tokens);

class VanillaModel : public Model {
 public:
  explicit VanillaModel(const VanillaConfig& cfg = VanillaConfig{})
      : params_(make_vanilla_params(cfg)) {}

  std::string variant() const override { return "vanilla"; }
  std::vector<NamedParam> params() override { return named_params(params_); }
  void init(SplitMix64& rng) override { init_params(params_, rng); }
  InstanceOutputs eval_instance(const Instance& inst) const override;
  BatchGradients batch_gradients(const std::vector<const Instance*>& batch,
                                 const AlignConfig& cfg) const override;
  nlohmann::json config_json() const override;

  VanillaParams& raw() { return params_; }
  const VanillaParams& raw() const { return params_; }

 private:
  VanillaParams params_;
};

}  // namespace attnalign
