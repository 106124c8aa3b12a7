#include "attnalign/transformer.hpp"

#include <cmath>

namespace attnalign {

namespace {

template <typename ParamsT, typename F>
void visit_all(ParamsT& p, F&& f) {
  f("token_embed", p.token_embed);
  f("visual_proj", p.visual_proj);
  f("pos_embed", p.pos_embed);
  f("seg_embed", p.seg_embed);
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    auto& l = p.layers[i];
    f(prefix + ".w_q", l.w_q);
    f(prefix + ".w_k", l.w_k);
    f(prefix + ".w_v", l.w_v);
    f(prefix + ".w_o", l.w_o);
    f(prefix + ".ff1", l.ff1);
    f(prefix + ".ff2", l.ff2);
    f(prefix + ".ln1_gamma", l.ln1_gamma);
    f(prefix + ".ln1_beta", l.ln1_beta);
    f(prefix + ".ln2_gamma", l.ln2_gamma);
    f(prefix + ".ln2_beta", l.ln2_beta);
  }
  f("cls_w", p.cls_w);
}

std::vector<int> active_layers(const TransformerConfig& cfg) {
  if (cfg.align_layers.empty()) {
    std::vector<int> all(static_cast<size_t>(cfg.layers));
    for (int i = 0; i < cfg.layers; ++i) all[static_cast<size_t>(i)] = i;
    return all;
  }
  for (int l : cfg.align_layers) {
    if (l < 0 || l >= cfg.layers) throw ConfigError("align layer index out of range");
  }
  return cfg.align_layers;
}

std::vector<int> with_separator(const std::vector<int>& query,
                                const std::vector<int>& candidate) {
  std::vector<int> out = query;
  out.push_back(tokens::kSep);
  out.insert(out.end(), candidate.begin(), candidate.end());
  return out;
}

}  // namespace

LayerAttentionStack::LayerAttentionStack(Tensor r) : rows(std::move(r)) {
  if (rows.rank() != 2) throw ContractError("attention stack must be rank 2");
  for (int l = 0; l < rows.shape[0]; ++l) {
    double total = 0.0;
    for (int j = 0; j < rows.shape[1]; ++j) {
      if (rows.at(l, j) < 0.0) throw ContractError("attention stack has a negative weight");
      total += rows.at(l, j);
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw ContractError("attention stack row " + std::to_string(l) + " sums to " +
                          std::to_string(total));
    }
  }
}

TransformerParams make_transformer_params(const TransformerConfig& cfg) {
  if (cfg.d_model % cfg.heads != 0) {
    throw ConfigError("d_model must be divisible by the head count");
  }
  if (cfg.layers < 1 || cfg.heads < 1 || cfg.max_len < 8) {
    throw ConfigError("transformer config out of range");
  }
  TransformerParams p;
  p.cfg = cfg;
  const int d = cfg.d_model;
  p.token_embed = Tensor::zeros({tokens::kVocab, d});
  p.visual_proj = Tensor::zeros({kObjectFeatureDim, d});
  p.pos_embed = Tensor::zeros({cfg.max_len, d});
  p.seg_embed = Tensor::zeros({2, d});
  p.layers.resize(static_cast<size_t>(cfg.layers));
  for (auto& l : p.layers) {
    l.w_q = Tensor::zeros({d, d});
    l.w_k = Tensor::zeros({d, d});
    l.w_v = Tensor::zeros({d, d});
    l.w_o = Tensor::zeros({d, d});
    l.ff1 = Tensor::zeros({d, cfg.d_ff});
    l.ff2 = Tensor::zeros({cfg.d_ff, d});
    l.ln1_gamma = Tensor::zeros({d});
    l.ln1_beta = Tensor::zeros({d});
    l.ln2_gamma = Tensor::zeros({d});
    l.ln2_beta = Tensor::zeros({d});
  }
  p.cls_w = Tensor::zeros({d, 1});
  return p;
}

std::vector<NamedParam> named_params(TransformerParams& p) {
  std::vector<NamedParam> out;
  visit_all(p, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

void init_params(TransformerParams& p, SplitMix64& rng) {
  visit_all(p, [&](const std::string& name, Tensor& t) {
    // Layer-norm scales start at identity and consume no randomness.
    if (name.find("gamma") != std::string::npos) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (name.find("beta") != std::string::npos) {
      std::fill(t.data.begin(), t.data.end(), 0.0);
    } else {
      init_uniform(t, rng);
    }
  });
}

TransformerNodes register_params(Tape& tape, const TransformerParams& p) {
  std::vector<Value> values;
  visit_all(const_cast<TransformerParams&>(p),
            [&](const std::string&, Tensor& t) { values.push_back(tape.leaf(t)); });
  return nodes_from_values(p.cfg, values);
}

TransformerNodes nodes_from_values(const TransformerConfig& cfg,
                                   const std::vector<Value>& values) {
  size_t k = 0;
  auto next = [&]() {
    if (k >= values.size()) throw ContractError("too few parameter values for transformer");
    return values[k++];
  };
  TransformerNodes n;
  n.token_embed = next();
  n.visual_proj = next();
  n.pos_embed = next();
  n.seg_embed = next();
  n.layers.resize(static_cast<size_t>(cfg.layers));
  for (auto& l : n.layers) {
    l.w_q = next();
    l.w_k = next();
    l.w_v = next();
    l.w_o = next();
    l.ff1 = next();
    l.ff2 = next();
    l.ln1_gamma = next();
    l.ln1_beta = next();
    l.ln2_gamma = next();
    l.ln2_beta = next();
  }
  n.cls_w = next();
  if (k != values.size()) throw ContractError("too many parameter values for transformer");
  return n;
}

BuiltSequence build_sequence(Tape& tape, const TransformerConfig& cfg,
                             const TransformerNodes& nodes,
                             const std::vector<int>& query_tokens,
                             const std::vector<int>& candidate_tokens,
                             const Instance& inst) {
  const int n = inst.object_count();
  std::vector<int> text_ids;
  text_ids.push_back(tokens::kCls);
  text_ids.insert(text_ids.end(), query_tokens.begin(), query_tokens.end());
  text_ids.push_back(tokens::kSep);
  text_ids.insert(text_ids.end(), candidate_tokens.begin(), candidate_tokens.end());
  text_ids.push_back(tokens::kSep);
  const int text_len = static_cast<int>(text_ids.size());
  const int total = text_len + n + 1;
  if (total > cfg.max_len) {
    throw DataError("sequence of length " + std::to_string(total) +
                    " exceeds the configured maximum " + std::to_string(cfg.max_len));
  }
  for (int id : text_ids) {
    if (id < 0 || id >= tokens::kVocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }

  Value text = tape.gather_rows(nodes.token_embed, text_ids);
  Value visual = tape.matmul(tape.constant(inst.objects), nodes.visual_proj);
  Value end = tape.gather_rows(nodes.token_embed, {tokens::kEnd});
  Value base = tape.concat({text, visual, end}, 0);

  // Text positions are ordinal; the visual tokens (an unordered object set)
  // share one position row, and [END] gets the next one regardless of N.
  std::vector<int> pos_ids(static_cast<size_t>(total));
  std::vector<int> seg_ids(static_cast<size_t>(total));
  for (int i = 0; i < text_len; ++i) {
    pos_ids[static_cast<size_t>(i)] = i;
    seg_ids[static_cast<size_t>(i)] = 0;
  }
  BuiltSequence out;
  for (int i = 0; i < n; ++i) {
    pos_ids[static_cast<size_t>(text_len + i)] = text_len;
    seg_ids[static_cast<size_t>(text_len + i)] = 1;
    out.visual_positions.push_back(text_len + i);
  }
  pos_ids[static_cast<size_t>(total - 1)] = text_len + 1;
  seg_ids[static_cast<size_t>(total - 1)] = 0;

  Value pos = tape.gather_rows(nodes.pos_embed, std::move(pos_ids));
  Value seg = tape.gather_rows(nodes.seg_embed, std::move(seg_ids));
  out.embedded = tape.add(tape.add(base, pos), seg);
  return out;
}

AttentionOut multi_head_self_attention(Tape& tape, Value x,
                                       const TransformerLayerNodes& layer, int heads) {
  const Tensor& tx = tape.val(x);
  if (tx.rank() != 2) throw ContractError("self-attention input must be [S x d]");
  const int d = tx.shape[1];
  if (d % heads != 0) throw ContractError("d_model not divisible by head count");
  const int d_head = d / heads;

  Value q = tape.matmul(x, layer.w_q);
  Value k = tape.matmul(x, layer.w_k);
  Value v = tape.matmul(x, layer.w_v);

  AttentionOut out;
  std::vector<Value> contexts;
  for (int h = 0; h < heads; ++h) {
    Value qh = tape.slice_cols(q, h * d_head, d_head);
    Value kh = tape.slice_cols(k, h * d_head, d_head);
    Value vh = tape.slice_cols(v, h * d_head, d_head);
    Value scores = tape.mul_scalar(tape.matmul(qh, tape.transpose(kh)),
                                   1.0 / std::sqrt(static_cast<double>(d_head)));
    Value probs = tape.softmax(scores, 1);
    out.head_probs.push_back(probs);
    contexts.push_back(tape.matmul(probs, vh));
  }
  out.output = tape.matmul(tape.concat(contexts, 1), layer.w_o);
  return out;
}

std::vector<Value> extract_cls_visual_attention(
    Tape& tape, const std::vector<std::vector<Value>>& per_layer_probs,
    const std::vector<int>& visual_positions) {
  if (visual_positions.empty()) {
    throw ContractError("attention extraction needs at least one visual position");
  }
  std::vector<Value> stack;
  stack.reserve(per_layer_probs.size());
  for (const auto& heads : per_layer_probs) {
    if (heads.empty()) throw ContractError("layer carries no attention heads");
    Value acc = heads[0];
    for (size_t h = 1; h < heads.size(); ++h) acc = tape.add(acc, heads[h]);
    Value avg = tape.mul_scalar(acc, 1.0 / static_cast<double>(heads.size()));
    Value cls_row = tape.transpose(tape.select_row(avg, 0));  // [S x 1]
    Value vis = tape.reshape(tape.gather_rows(cls_row, visual_positions),
                             {static_cast<int>(visual_positions.size())});
    Value total = tape.sum(vis);
    if (tape.scalar_val(total) <= 0.0) {
      throw ContractError("visual attention mass vanished before renormalization");
    }
    stack.push_back(tape.scale_by_scalar(vis, tape.recip(total)));
  }
  return stack;
}

TransformerForward transformer_forward(Tape& tape, const TransformerConfig& cfg,
                                       const TransformerNodes& nodes, const Instance& inst,
                                       const std::vector<int>& query_tokens,
                                       const std::vector<int>& candidate_tokens) {
  BuiltSequence seq = build_sequence(tape, cfg, nodes, query_tokens, candidate_tokens, inst);
  Value x = seq.embedded;
  std::vector<std::vector<Value>> per_layer_probs;
  for (const auto& layer : nodes.layers) {
    AttentionOut att = multi_head_self_attention(tape, x, layer, cfg.heads);
    per_layer_probs.push_back(att.head_probs);
    Value x1 = tape.layer_norm(tape.add(x, att.output), layer.ln1_gamma, layer.ln1_beta);
    Value ff = tape.matmul(tape.leaky_relu(tape.matmul(x1, layer.ff1)), layer.ff2);
    x = tape.layer_norm(tape.add(x1, ff), layer.ln2_gamma, layer.ln2_beta);
  }
  TransformerForward out;
  out.stack = extract_cls_visual_attention(tape, per_layer_probs, seq.visual_positions);
  out.logit = tape.reshape(tape.matmul(tape.select_row(x, 0), nodes.cls_w), {1});
  return out;
}

double layerwise_dot(const LayerAttentionStack& a, const LayerAttentionStack& b) {
  if (a.rows.shape != b.rows.shape) {
    throw ContractError("layer stacks disagree: " + a.rows.shape_str() + " vs " +
                        b.rows.shape_str());
  }
  double acc = 0.0;
  for (int l = 0; l < a.rows.shape[0]; ++l) {
    for (int j = 0; j < a.rows.shape[1]; ++j) acc += a.rows.at(l, j) * b.rows.at(l, j);
  }
  return acc / a.rows.shape[0];
}

Value build_instance_loss(Tape& tape, const TransformerConfig& cfg,
                          const TransformerNodes& nodes, const Instance& inst,
                          const AlignConfig& align_cfg, double* l_qa_out, double* l_qar_out,
                          double* l_align_out) {
  const std::vector<int> mask = active_layers(cfg);

  std::array<MapStack, 4> maps_qa, maps_qar;
  std::vector<Value> logits_qa, logits_qar;
  for (int i = 0; i < 4; ++i) {
    TransformerForward f = transformer_forward(tape, cfg, nodes, inst, inst.question,
                                               inst.answers[static_cast<size_t>(i)]);
    logits_qa.push_back(f.logit);
    for (int l : mask) maps_qa[static_cast<size_t>(i)].rows.push_back(f.stack[static_cast<size_t>(l)]);
  }
  const std::vector<int> qar_query =
      with_separator(inst.question, inst.answers[static_cast<size_t>(inst.answer_label)]);
  for (int i = 0; i < 4; ++i) {
    TransformerForward f = transformer_forward(tape, cfg, nodes, inst, qar_query,
                                               inst.rationales[static_cast<size_t>(i)]);
    logits_qar.push_back(f.logit);
    for (int l : mask) maps_qar[static_cast<size_t>(i)].rows.push_back(f.stack[static_cast<size_t>(l)]);
  }

  Value l_qa = tape.cross_entropy_with_logits(tape.concat(logits_qa, 0), inst.answer_label);
  Value l_qar =
      tape.cross_entropy_with_logits(tape.concat(logits_qar, 0), inst.rationale_label);
  if (l_qa_out) *l_qa_out = tape.scalar_val(l_qa);
  if (l_qar_out) *l_qar_out = tape.scalar_val(l_qar);
  if (l_align_out) *l_align_out = 0.0;

  if (align_cfg.mode == AlignMode::None) {
    return tape.add(l_qa, l_qar);
  }
  AlignmentLosses al = alignment_losses(tape, maps_qa, maps_qar, inst.answer_label,
                                        inst.rationale_label, align_cfg);
  if (l_align_out) *l_align_out = tape.scalar_val(al.l_align);
  return total_loss(tape, l_qa, l_qar, al.l_align, align_cfg.lambda);
}

InstanceOutputs TransformerModel::eval_instance(const Instance& inst) const {
  Tape tape;
  TransformerNodes nodes = register_params(tape, params_);
  const TransformerConfig& cfg = params_.cfg;
  InstanceOutputs out;

  auto stack_tensor = [&](const std::vector<Value>& stack) {
    const int n = inst.object_count();
    Tensor rows = Tensor::zeros({cfg.layers, n});
    for (int l = 0; l < cfg.layers; ++l) {
      const Tensor& row = tape.val(stack[static_cast<size_t>(l)]);
      for (int j = 0; j < n; ++j) rows.at(l, j) = row.at(j);
    }
    return rows;
  };

  for (int i = 0; i < 4; ++i) {
    TransformerForward f = transformer_forward(tape, cfg, nodes, inst, inst.question,
                                               inst.answers[static_cast<size_t>(i)]);
    out.logits_qa[static_cast<size_t>(i)] = tape.scalar_val(f.logit);
    if (i == inst.answer_label) out.stack_qa_gold = stack_tensor(f.stack);
  }
  const std::vector<int> query =
      with_separator(inst.question, inst.answers[static_cast<size_t>(inst.answer_label)]);
  for (int i = 0; i < 4; ++i) {
    TransformerForward f = transformer_forward(tape, cfg, nodes, inst, query,
                                               inst.rationales[static_cast<size_t>(i)]);
    out.logits_qar[static_cast<size_t>(i)] = tape.scalar_val(f.logit);
    if (i == inst.rationale_label) out.stack_qar_gold = stack_tensor(f.stack);
  }
  return out;
}

BatchGradients TransformerModel::batch_gradients(const std::vector<const Instance*>& batch,
                                                 const AlignConfig& cfg) const {
  if (batch.empty()) throw ContractError("batch must be nonempty");
  Tape tape;
  std::vector<Value> leaves;
  visit_all(const_cast<TransformerParams&>(params_),
            [&](const std::string&, Tensor& t) { leaves.push_back(tape.leaf(t)); });
  TransformerNodes nodes = nodes_from_values(params_.cfg, leaves);

  BatchGradients out;
  Value acc{};
  bool first = true;
  for (const Instance* inst : batch) {
    double lq = 0.0, lr = 0.0, la = 0.0;
    Value loss = build_instance_loss(tape, params_.cfg, nodes, *inst, cfg, &lq, &lr, &la);
    out.l_qa += lq;
    out.l_qar += lr;
    out.l_align += la;
    acc = first ? loss : tape.add(acc, loss);
    first = false;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  Value mean_loss = tape.mul_scalar(acc, inv);
  out.l_qa *= inv;
  out.l_qar *= inv;
  out.l_align *= inv;

  tape.backward(mean_loss);
  out.grads.reserve(leaves.size());
  for (Value leaf : leaves) out.grads.push_back(tape.grad(leaf));
  return out;
}

nlohmann::json TransformerModel::config_json() const {
  return nlohmann::json{{"layers", params_.cfg.layers},   {"heads", params_.cfg.heads},
                        {"d_model", params_.cfg.d_model}, {"d_ff", params_.cfg.d_ff},
                        {"max_len", params_.cfg.max_len},
                        {"align_layers", params_.cfg.align_layers}};
}

}  // namespace attnalign
