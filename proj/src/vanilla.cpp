#include "attnalign/vanilla.hpp"

#include <cmath>

namespace attnalign {

namespace {

// Canonical parameter order; checkpoints, Adam state and packed gradient
// checks all rely on this never changing.
template <typename ParamsT, typename F>
void visit_gru(const std::string& prefix, ParamsT& g, F&& f) {
  f(prefix + ".w_xz", g.w_xz);
  f(prefix + ".w_xr", g.w_xr);
  f(prefix + ".w_xc", g.w_xc);
  f(prefix + ".w_hz", g.w_hz);
  f(prefix + ".w_hr", g.w_hr);
  f(prefix + ".w_hc", g.w_hc);
}

template <typename ParamsT, typename F>
void visit_process(const std::string& prefix, ParamsT& p, F&& f) {
  visit_gru(prefix + ".fwd", p.fwd, f);
  visit_gru(prefix + ".bwd", p.bwd, f);
  f(prefix + ".att.token_query_w", p.att.token_query_w);
  f(prefix + ".att.object_key_w", p.att.object_key_w);
  f(prefix + ".att.seq_query_w", p.att.seq_query_w);
  f(prefix + ".att.state_key_w", p.att.state_key_w);
  f(prefix + ".cls_w0", p.cls_w0);
  f(prefix + ".cls_w1", p.cls_w1);
}

template <typename ParamsT, typename F>
void visit_all(ParamsT& p, F&& f) {
  f("token_embed", p.token_embed);
  f("visual_proj", p.visual_proj);
  visit_process("qa", p.qa, f);
  visit_process("qar", p.qar, f);
}

struct Encoded {
  Value states;  // [M x 2 d_h]
  Value final;   // [1 x 2 d_h]
};

Encoded bi_gru_encode(Tape& tape, Value seq, const GruNodes& fwd, const GruNodes& bwd,
                      int d_hidden) {
  const int m = tape.val(seq).shape[0];

  auto run = [&](const GruNodes& dir, bool reverse) {
    Value xz = tape.matmul(seq, dir.w_xz);
    Value xr = tape.matmul(seq, dir.w_xr);
    Value xc = tape.matmul(seq, dir.w_xc);
    std::vector<Value> states(static_cast<size_t>(m));
    Value h = tape.constant(Tensor::zeros({1, d_hidden}));
    for (int step = 0; step < m; ++step) {
      const int t = reverse ? m - 1 - step : step;
      h = tape.gru_step(xz, xr, xc, t, h, dir.w_hz, dir.w_hr, dir.w_hc);
      states[static_cast<size_t>(t)] = h;
    }
    return states;
  };

  const std::vector<Value> fs = run(fwd, false);
  const std::vector<Value> bs = run(bwd, true);
  Encoded out;
  out.states = tape.concat({tape.concat(fs, 0), tape.concat(bs, 0)}, 1);
  out.final = tape.concat({fs.back(), bs.front()}, 1);
  return out;
}

// Token embedding concatenated with the referenced object's projection (tag
// tokens) or the mean projection (everything else).
Value embed_sequence(Tape& tape, const VanillaNodes& nodes, const InstanceContext& ctx,
                     const std::vector<int>& token_ids) {
  if (token_ids.empty()) throw DataError("cannot embed an empty token sequence");
  std::vector<int> vis_rows;
  vis_rows.reserve(token_ids.size());
  for (int id : token_ids) {
    if (id < 0 || id >= tokens::kVocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (tokens::is_tag(id)) {
      const int obj = tokens::tag_object(id);
      if (obj >= ctx.n_objects) {
        throw DataError("tag token " + std::to_string(id) + " references object " +
                        std::to_string(obj) + " but the instance has only " +
                        std::to_string(ctx.n_objects) + " objects");
      }
      vis_rows.push_back(obj);
    } else {
      vis_rows.push_back(ctx.n_objects);  // mean row
    }
  }
  Value text = tape.gather_rows(nodes.token_embed, std::vector<int>(token_ids));
  Value vis = tape.gather_rows(ctx.proj_with_mean, std::move(vis_rows));
  return tape.concat({text, vis}, 1);
}

std::vector<int> with_separator(const std::vector<int>& query,
                                const std::vector<int>& candidate) {
  std::vector<int> out = query;
  out.push_back(tokens::kSep);
  out.insert(out.end(), candidate.begin(), candidate.end());
  return out;
}

}  // namespace

VanillaParams make_vanilla_params(const VanillaConfig& cfg) {
  VanillaParams p;
  p.cfg = cfg;
  const int d_in = cfg.d_token + cfg.d_obj;
  const int d_state = 2 * cfg.d_hidden;
  p.token_embed = Tensor::zeros({tokens::kVocab, cfg.d_token});
  p.visual_proj = Tensor::zeros({kObjectFeatureDim, cfg.d_obj});
  for (ProcessParams* proc : {&p.qa, &p.qar}) {
    for (GruParams* g : {&proc->fwd, &proc->bwd}) {
      g->w_xz = Tensor::zeros({d_in, cfg.d_hidden});
      g->w_xr = Tensor::zeros({d_in, cfg.d_hidden});
      g->w_xc = Tensor::zeros({d_in, cfg.d_hidden});
      g->w_hz = Tensor::zeros({cfg.d_hidden, cfg.d_hidden});
      g->w_hr = Tensor::zeros({cfg.d_hidden, cfg.d_hidden});
      g->w_hc = Tensor::zeros({cfg.d_hidden, cfg.d_hidden});
    }
    proc->att.token_query_w = Tensor::zeros({d_in, cfg.d_att});
    proc->att.object_key_w = Tensor::zeros({cfg.d_obj, cfg.d_att});
    proc->att.seq_query_w = Tensor::zeros({d_state, cfg.d_att});
    proc->att.state_key_w = Tensor::zeros({d_state, cfg.d_att});
    proc->cls_w0 = Tensor::zeros({d_state + cfg.d_obj, cfg.d_hidden});
    proc->cls_w1 = Tensor::zeros({cfg.d_hidden, 1});
  }
  return p;
}

std::vector<NamedParam> named_params(VanillaParams& p) {
  std::vector<NamedParam> out;
  visit_all(p, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

void init_params(VanillaParams& p, SplitMix64& rng) {
  visit_all(p, [&](const std::string&, Tensor& t) { init_uniform(t, rng); });
}

VanillaNodes register_params(Tape& tape, const VanillaParams& p) {
  std::vector<Value> values;
  visit_all(const_cast<VanillaParams&>(p),
            [&](const std::string&, Tensor& t) { values.push_back(tape.leaf(t)); });
  return nodes_from_values(values);
}

VanillaNodes nodes_from_values(const std::vector<Value>& values) {
  size_t k = 0;
  auto next = [&]() {
    if (k >= values.size()) throw ContractError("too few parameter values for vanilla model");
    return values[k++];
  };
  VanillaNodes n;
  n.token_embed = next();
  n.visual_proj = next();
  for (ProcessNodes* proc : {&n.qa, &n.qar}) {
    for (GruNodes* g : {&proc->fwd, &proc->bwd}) {
      g->w_xz = next();
      g->w_xr = next();
      g->w_xc = next();
      g->w_hz = next();
      g->w_hr = next();
      g->w_hc = next();
    }
    proc->att.token_query_w = next();
    proc->att.object_key_w = next();
    proc->att.seq_query_w = next();
    proc->att.state_key_w = next();
    proc->cls_w0 = next();
    proc->cls_w1 = next();
  }
  if (k != values.size()) throw ContractError("too many parameter values for vanilla model");
  return n;
}

InstanceContext build_instance_context(Tape& tape, const VanillaNodes& nodes,
                                       const Instance& inst) {
  InstanceContext ctx;
  ctx.n_objects = inst.object_count();
  Value objects = tape.constant(inst.objects);
  ctx.objects_proj = tape.matmul(objects, nodes.visual_proj);
  Value mean_row = tape.matmul(
      tape.constant(Tensor::full({1, ctx.n_objects}, 1.0 / ctx.n_objects)), ctx.objects_proj);
  ctx.proj_with_mean = tape.concat({ctx.objects_proj, mean_row}, 0);
  return ctx;
}

CandidateGraph score_candidate(Tape& tape, const VanillaNodes& nodes,
                               const InstanceContext& ctx, const ProcessNodes& proc,
                               const std::vector<int>& query_tokens,
                               const std::vector<int>& candidate_tokens) {
  const std::vector<int> all_tokens = with_separator(query_tokens, candidate_tokens);
  Value seq = embed_sequence(tape, nodes, ctx, all_tokens);
  const int d_hidden = tape.val(proc.cls_w1).shape[0];
  Encoded enc = bi_gru_encode(tape, seq, proc.fwd, proc.bwd, d_hidden);

  Value per_token_maps = object_wise_attention(tape, seq, ctx.objects_proj, proc.att);
  Value token_weights = token_wise_attention(tape, enc.states, enc.final, proc.att);
  Aggregated agg = aggregate(tape, token_weights, per_token_maps, ctx.objects_proj);

  Value feat = tape.concat({enc.final, agg.refined}, 1);
  Value hidden = tape.leaky_relu(tape.matmul(feat, proc.cls_w0));
  Value logit = tape.reshape(tape.matmul(hidden, proc.cls_w1), {1});

  CandidateGraph out;
  out.logit = logit;
  out.attention = agg.attention;
  return out;
}

Value build_instance_loss(Tape& tape, const VanillaNodes& nodes, const Instance& inst,
                          const AlignConfig& cfg, LossParts* parts) {
  InstanceContext ctx = build_instance_context(tape, nodes, inst);

  std::array<MapStack, 4> maps_qa, maps_qar;
  std::vector<Value> logits_qa, logits_qar;
  for (int i = 0; i < 4; ++i) {
    CandidateGraph g = score_candidate(tape, nodes, ctx, nodes.qa, inst.question,
                                       inst.answers[static_cast<size_t>(i)]);
    logits_qa.push_back(g.logit);
    maps_qa[static_cast<size_t>(i)].rows.push_back(g.attention);
  }
  const std::vector<int> qar_query =
      with_separator(inst.question, inst.answers[static_cast<size_t>(inst.answer_label)]);
  for (int i = 0; i < 4; ++i) {
    CandidateGraph g = score_candidate(tape, nodes, ctx, nodes.qar, qar_query,
                                       inst.rationales[static_cast<size_t>(i)]);
    logits_qar.push_back(g.logit);
    maps_qar[static_cast<size_t>(i)].rows.push_back(g.attention);
  }

  Value l_qa = tape.cross_entropy_with_logits(tape.concat(logits_qa, 0), inst.answer_label);
  Value l_qar =
      tape.cross_entropy_with_logits(tape.concat(logits_qar, 0), inst.rationale_label);

  if (parts) {
    parts->l_qa = tape.scalar_val(l_qa);
    parts->l_qar = tape.scalar_val(l_qar);
    parts->l_align = 0.0;
  }
  if (cfg.mode == AlignMode::None) {
    return tape.add(l_qa, l_qar);
  }
  AlignmentLosses al = alignment_losses(tape, maps_qa, maps_qar, inst.answer_label,
                                        inst.rationale_label, cfg);
  if (parts) parts->l_align = tape.scalar_val(al.l_align);
  return total_loss(tape, l_qa, l_qar, al.l_align, cfg.lambda);
}

std::vector<CandidateScore> forward_q2a(const VanillaParams& p, const Instance& inst) {
  Tape tape;
  VanillaNodes nodes = register_params(tape, p);
  InstanceContext ctx = build_instance_context(tape, nodes, inst);
  std::vector<CandidateScore> out;
  out.reserve(4);
  for (int i = 0; i < 4; ++i) {
    CandidateGraph g = score_candidate(tape, nodes, ctx, nodes.qa, inst.question,
                                       inst.answers[static_cast<size_t>(i)]);
    out.push_back({tape.scalar_val(g.logit), AttentionMap(tape.val(g.attention))});
  }
  return out;
}

std::vector<CandidateScore> forward_qa2r(const VanillaParams& p, const Instance& inst,
                                         const std::vector<int>& answer_tokens) {
  Tape tape;
  VanillaNodes nodes = register_params(tape, p);
  InstanceContext ctx = build_instance_context(tape, nodes, inst);
  const std::vector<int> query = with_separator(inst.question, answer_tokens);
  std::vector<CandidateScore> out;
  out.reserve(4);
  for (int i = 0; i < 4; ++i) {
    CandidateGraph g = score_candidate(tape, nodes, ctx, nodes.qar, query,
                                       inst.rationales[static_cast<size_t>(i)]);
    out.push_back({tape.scalar_val(g.logit), AttentionMap(tape.val(g.attention))});
  }
  return out;
}

InstanceOutputs VanillaModel::eval_instance(const Instance& inst) const {
  Tape tape;
  VanillaNodes nodes = register_params(tape, params_);
  InstanceContext ctx = build_instance_context(tape, nodes, inst);
  InstanceOutputs out;
  Value map_qa_gold{}, map_qar_gold{};
  for (int i = 0; i < 4; ++i) {
    CandidateGraph g = score_candidate(tape, nodes, ctx, nodes.qa, inst.question,
                                       inst.answers[static_cast<size_t>(i)]);
    out.logits_qa[static_cast<size_t>(i)] = tape.scalar_val(g.logit);
    if (i == inst.answer_label) map_qa_gold = g.attention;
  }
  const std::vector<int> query =
      with_separator(inst.question, inst.answers[static_cast<size_t>(inst.answer_label)]);
  for (int i = 0; i < 4; ++i) {
    CandidateGraph g = score_candidate(tape, nodes, ctx, nodes.qar, query,
                                       inst.rationales[static_cast<size_t>(i)]);
    out.logits_qar[static_cast<size_t>(i)] = tape.scalar_val(g.logit);
    if (i == inst.rationale_label) map_qar_gold = g.attention;
  }
  const int n = ctx.n_objects;
  out.stack_qa_gold = Tensor({1, n}, tape.val(map_qa_gold).data);
  out.stack_qar_gold = Tensor({1, n}, tape.val(map_qar_gold).data);
  return out;
}

BatchGradients VanillaModel::batch_gradients(const std::vector<const Instance*>& batch,
                                             const AlignConfig& cfg) const {
  if (batch.empty()) throw ContractError("batch must be nonempty");
  Tape tape;
  std::vector<Value> leaves;
  visit_all(const_cast<VanillaParams&>(params_),
            [&](const std::string&, Tensor& t) { leaves.push_back(tape.leaf(t)); });
  VanillaNodes nodes = nodes_from_values(leaves);

  BatchGradients out;
  Value acc{};
  bool first = true;
  for (const Instance* inst : batch) {
    LossParts parts;
    Value loss = build_instance_loss(tape, nodes, *inst, cfg, &parts);
    out.l_qa += parts.l_qa;
    out.l_qar += parts.l_qar;
    out.l_align += parts.l_align;
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

nlohmann::json VanillaModel::config_json() const {
  return nlohmann::json{{"d_token", params_.cfg.d_token},
                        {"d_obj", params_.cfg.d_obj},
                        {"d_hidden", params_.cfg.d_hidden},
                        {"d_att", params_.cfg.d_att}};
}

}  // namespace attnalign
