#pragma once

#include <array>
#include <string>
#include <vector>

#include "attnalign/tensor.hpp"

namespace attnalign {

enum class AlignMode { None, Dot, Rank };

AlignMode align_mode_from_string(const std::string& s);
std::string to_string(AlignMode m);

struct AlignConfig {
  AlignMode mode = AlignMode::Dot;
  double alpha = 10.0;   // sharpness of the smoothed sort
  double lambda = 1.0;   // weight of the alignment term in the total loss

  void validate() const;
};

// Rank positions over one attention map: 1 marks the largest weight. Hard
// vectors are exact permutations of 1..N; smoothed ones live in [1, N].
struct RankVector {
  Tensor ranks;
  bool hard = false;
};

// Numeric (constant) side -------------------------------------------------

// Ties broken toward the lower index; never carries gradient.
RankVector hard_ranks(const Tensor& weights);

// pi_i = 1 + sum_{j != i} sigmoid(-alpha (c_i - c_j)).
Tensor approx_ranks_values(const Tensor& weights, double alpha);

// Gain-discount ratio against the target ordering, normalized so a matching
// ordering scores exactly 1. `pred_ranks` may be hard or smoothed.
double ndcg_value(const Tensor& pred_ranks, const RankVector& target);

double sim_dot_value(const Tensor& a, const Tensor& b);

// Differentiable (tape) side ----------------------------------------------

Value sim_dot(Tape& tape, Value map_a, Value map_b);
Value approx_ranks(Tape& tape, Value weights, double alpha);
// Differentiable in pred only; the target is a hard constant.
Value ndcg(Tape& tape, Value pred_smoothed, const RankVector& target);
Value sim_rank(Tape& tape, Value map_pred, const Tensor& map_target, double alpha);

// One attention distribution per layer; the vanilla model is the L = 1 case.
struct MapStack {
  std::vector<Value> rows;
};

// Per-layer similarity under cfg.mode, averaged over layers. In rank mode
// only `pred` carries gradient.
Value stack_similarity(Tape& tape, const MapStack& pred, const MapStack& target,
                       const AlignConfig& cfg);

struct AlignmentLosses {
  Value l_qa_att;
  Value l_qar_att;
  Value l_align;
};

// The two listwise cross-entropies over candidate-map similarities plus
// their sum. Requires exactly four candidates per process.
AlignmentLosses alignment_losses(Tape& tape, const std::array<MapStack, 4>& maps_qa,
                                 const std::array<MapStack, 4>& maps_qar, int gold_a,
                                 int gold_r, const AlignConfig& cfg);

// L = L_qa + L_qar + lambda * L_align.
Value total_loss(Tape& tape, Value l_qa, Value l_qar, Value l_align, double lambda);

}  // namespace attnalign
