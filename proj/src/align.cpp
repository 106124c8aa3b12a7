#include "attnalign/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace attnalign {

namespace {

constexpr double kLn2 = 0.6931471805599453;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Gain grows as the predicted rank improves; rank 1 carries the largest
// gain. Written as G(N+1-rank) so that pairing the best gain with the
// smallest discount — i.e. matching the target ordering — is the maximum.
double gain(double rank, int n) { return std::exp2(static_cast<double>(n) + 1.0 - rank) - 1.0; }

double ideal_sum(const RankVector& target) {
  const int n = target.ranks.shape[0];
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    z += gain(target.ranks.at(i), n) / std::log1p(target.ranks.at(i));
  }
  return z;
}

}  // namespace

AlignMode align_mode_from_string(const std::string& s) {
  if (s == "none") return AlignMode::None;
  if (s == "dot") return AlignMode::Dot;
  if (s == "rank") return AlignMode::Rank;
  throw ConfigError("unknown align mode '" + s + "' (expected none|dot|rank)");
}

std::string to_string(AlignMode m) {
  switch (m) {
    case AlignMode::None: return "none";
    case AlignMode::Dot: return "dot";
    case AlignMode::Rank: return "rank";
  }
  return "?";
}

void AlignConfig::validate() const {
  if (alpha <= 0.0) throw ConfigError("alpha must be positive");
  if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
}

RankVector hard_ranks(const Tensor& weights) {
  if (weights.rank() != 1 || weights.shape[0] < 1) {
    throw ContractError("hard_ranks needs a nonempty rank-1 tensor");
  }
  const int n = weights.shape[0];
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return weights.at(a) > weights.at(b);  // stable: ties keep ascending index
  });
  RankVector out;
  out.hard = true;
  out.ranks = Tensor::zeros({n});
  for (int pos = 0; pos < n; ++pos) {
    out.ranks.at(order[static_cast<size_t>(pos)]) = static_cast<double>(pos + 1);
  }
  return out;
}

Tensor approx_ranks_values(const Tensor& weights, double alpha) {
  if (alpha <= 0.0) throw ContractError("alpha must be positive");
  const int n = weights.shape[0];
  Tensor out = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) {
    double r = 1.0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      r += sigmoid(-alpha * (weights.at(i) - weights.at(j)));
    }
    out.at(i) = r;
  }
  return out;
}

double ndcg_value(const Tensor& pred_ranks, const RankVector& target) {
  if (!target.hard) throw ContractError("ndcg target must be hard");
  const int n = target.ranks.shape[0];
  if (pred_ranks.shape[0] != n) {
    throw ContractError("ndcg length mismatch: " + pred_ranks.shape_str() + " vs " +
                        target.ranks.shape_str());
  }
  double dcg = 0.0;
  for (int i = 0; i < n; ++i) {
    dcg += gain(pred_ranks.at(i), n) / std::log1p(target.ranks.at(i));
  }
  return dcg / ideal_sum(target);
}

double sim_dot_value(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b) || a.rank() != 1) {
    throw ContractError("sim_dot length mismatch: " + a.shape_str() + " vs " + b.shape_str());
  }
  double s = 0.0;
  for (int i = 0; i < a.shape[0]; ++i) s += a.at(i) * b.at(i);
  return s;
}

Value sim_dot(Tape& tape, Value map_a, Value map_b) {
  const Tensor& a = tape.val(map_a);
  const Tensor& b = tape.val(map_b);
  if (!a.same_shape(b) || a.rank() != 1) {
    throw ContractError("sim_dot length mismatch: " + a.shape_str() + " vs " + b.shape_str());
  }
  return tape.sum(tape.mul(map_a, map_b));
}

Value approx_ranks(Tape& tape, Value weights, double alpha) {
  if (alpha <= 0.0) throw ContractError("alpha must be positive");
  const Tensor& w = tape.val(weights);
  const int n = w.shape[0];
  // Pairwise differences c_i - c_j as an [N x N] outer construction; the
  // diagonal contributes sigmoid(0) = 0.5, hence the +0.5 instead of +1.
  Value col = tape.reshape(weights, {n, 1});
  Value ones_row = tape.constant(Tensor::full({1, n}, 1.0));
  Value ci = tape.matmul(col, ones_row);
  Value diff = tape.sub(ci, tape.transpose(ci));
  Value s = tape.sigmoid(tape.mul_scalar(diff, -alpha));
  Value row_sums = tape.matmul(s, tape.constant(Tensor::full({n, 1}, 1.0)));
  return tape.add_scalar(tape.reshape(row_sums, {n}), 0.5);
}

Value ndcg(Tape& tape, Value pred_smoothed, const RankVector& target) {
  if (!target.hard) throw ContractError("ndcg target must be hard");
  const int n = target.ranks.shape[0];
  if (tape.val(pred_smoothed).shape[0] != n) {
    throw ContractError("ndcg length mismatch against target of " + target.ranks.shape_str());
  }
  Tensor discounts = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) discounts.at(i) = 1.0 / std::log1p(target.ranks.at(i));
  Value relevance = tape.sub(tape.constant(Tensor::full({n}, static_cast<double>(n) + 1.0)),
                             pred_smoothed);
  Value gains = tape.add_scalar(tape.exp(tape.mul_scalar(relevance, kLn2)), -1.0);
  Value dcg = tape.sum(tape.mul(gains, tape.constant(std::move(discounts))));
  return tape.mul_scalar(dcg, 1.0 / ideal_sum(target));
}

Value sim_rank(Tape& tape, Value map_pred, const Tensor& map_target, double alpha) {
  if (tape.val(map_pred).shape[0] != map_target.shape[0]) {
    throw ContractError("sim_rank length mismatch");
  }
  return ndcg(tape, approx_ranks(tape, map_pred, alpha), hard_ranks(map_target));
}

Value stack_similarity(Tape& tape, const MapStack& pred, const MapStack& target,
                       const AlignConfig& cfg) {
  if (pred.rows.empty() || pred.rows.size() != target.rows.size()) {
    throw ContractError("stack similarity needs equal nonempty layer counts");
  }
  std::vector<Value> sims;
  sims.reserve(pred.rows.size());
  for (size_t l = 0; l < pred.rows.size(); ++l) {
    switch (cfg.mode) {
      case AlignMode::Dot:
        sims.push_back(sim_dot(tape, pred.rows[l], target.rows[l]));
        break;
      case AlignMode::Rank:
        sims.push_back(sim_rank(tape, pred.rows[l], tape.val(target.rows[l]), cfg.alpha));
        break;
      case AlignMode::None:
        throw ContractError("stack similarity undefined in align mode none");
    }
  }
  Value acc = sims[0];
  for (size_t l = 1; l < sims.size(); ++l) acc = tape.add(acc, sims[l]);
  return sims.size() == 1 ? acc : tape.mul_scalar(acc, 1.0 / static_cast<double>(sims.size()));
}

AlignmentLosses alignment_losses(Tape& tape, const std::array<MapStack, 4>& maps_qa,
                                 const std::array<MapStack, 4>& maps_qar, int gold_a,
                                 int gold_r, const AlignConfig& cfg) {
  if (gold_a < 0 || gold_a > 3 || gold_r < 0 || gold_r > 3) {
    throw ContractError("gold indices must address the four candidates");
  }
  cfg.validate();

  auto listwise = [&](const std::array<MapStack, 4>& preds, const MapStack& target,
                      int gold) {
    std::vector<Value> sims;
    for (int i = 0; i < 4; ++i) {
      sims.push_back(stack_similarity(tape, preds[static_cast<size_t>(i)], target, cfg));
    }
    Value logits = tape.concat(sims, 0);
    return tape.cross_entropy_with_logits(logits, gold);
  };

  AlignmentLosses out;
  out.l_qa_att = listwise(maps_qa, maps_qar[static_cast<size_t>(gold_r)], gold_a);
  out.l_qar_att = listwise(maps_qar, maps_qa[static_cast<size_t>(gold_a)], gold_r);
  out.l_align = tape.add(out.l_qa_att, out.l_qar_att);
  return out;
}

Value total_loss(Tape& tape, Value l_qa, Value l_qar, Value l_align, double lambda) {
  if (lambda < 0.0) throw ContractError("lambda must be nonnegative");
  Value base = tape.add(l_qa, l_qar);
  if (lambda == 0.0) return base;  // keeps the alignment subgraph out of backward
  return tape.add(base, tape.mul_scalar(l_align, lambda));
}

}  // namespace attnalign
