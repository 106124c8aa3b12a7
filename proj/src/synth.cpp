#include "attnalign/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "attnalign/errors.hpp"
#include "json.hpp"

namespace attnalign {

namespace {

using nlohmann::json;

void fisher_yates(std::vector<int>& a, SplitMix64& rng) {
  for (int i = static_cast<int>(a.size()) - 1; i >= 1; --i) {
    const int j = rng.below(i + 1);
    std::swap(a[static_cast<size_t>(i)], a[static_cast<size_t>(j)]);
  }
}

void validate(const GenConfig& cfg) {
  if (cfg.objects < 4 || cfg.objects > 8) {
    throw ConfigError("objects per instance must be in [4, 8], got " +
                      std::to_string(cfg.objects));
  }
  if (cfg.count < 0) throw ConfigError("instance count must be nonnegative");
  if (cfg.noise_sigma < 0.0) throw ConfigError("noise_sigma must be nonnegative");
}

// Picks 3 distractor objects (never `evidence`) and a placement of the gold
// candidate among the four slots. Consumes two shuffles from the stream.
struct CandidateLayout {
  std::array<int, 3> distractors;
  std::array<int, 4> slot_object;  // object index per candidate slot
  int gold_slot;
};

CandidateLayout layout_candidates(int n, int evidence, SplitMix64& rng) {
  std::vector<int> others;
  for (int i = 0; i < n; ++i) {
    if (i != evidence) others.push_back(i);
  }
  fisher_yates(others, rng);
  CandidateLayout out{};
  for (int i = 0; i < 3; ++i) out.distractors[static_cast<size_t>(i)] = others[static_cast<size_t>(i)];

  std::vector<int> order{0, 1, 2, 3};  // 0 = gold, 1..3 = distractors
  fisher_yates(order, rng);
  for (int slot = 0; slot < 4; ++slot) {
    const int who = order[static_cast<size_t>(slot)];
    out.slot_object[static_cast<size_t>(slot)] =
        who == 0 ? evidence : out.distractors[static_cast<size_t>(who - 1)];
    if (who == 0) out.gold_slot = slot;
  }
  return out;
}

json instance_to_json(const Instance& inst) {
  json j;
  const int n = inst.object_count();
  json objs = json::array();
  for (int i = 0; i < n; ++i) {
    json row = json::array();
    for (int d = 0; d < kObjectFeatureDim; ++d) row.push_back(inst.objects.at(i, d));
    objs.push_back(std::move(row));
  }
  j["objects"] = std::move(objs);
  j["question"] = inst.question;
  j["answers"] = inst.answers;
  j["rationales"] = inst.rationales;
  j["answer_label"] = inst.answer_label;
  j["rationale_label"] = inst.rationale_label;
  j["evidence"] = inst.evidence;
  return j;
}

Instance instance_from_json(const json& j) {
  Instance inst;
  const auto& objs = j.at("objects");
  const int n = static_cast<int>(objs.size());
  if (n < 1) throw DataError("instance has no objects");
  inst.objects = Tensor::zeros({n, kObjectFeatureDim});
  for (int i = 0; i < n; ++i) {
    const auto& row = objs.at(static_cast<size_t>(i));
    if (static_cast<int>(row.size()) != kObjectFeatureDim) {
      throw DataError("object feature row has wrong width");
    }
    for (int d = 0; d < kObjectFeatureDim; ++d) {
      inst.objects.at(i, d) = row.at(static_cast<size_t>(d)).get<double>();
    }
  }
  inst.question = j.at("question").get<std::vector<int>>();
  const auto& ans = j.at("answers");
  const auto& rat = j.at("rationales");
  if (ans.size() != 4 || rat.size() != 4) {
    throw DataError("instance must carry exactly 4 answers and 4 rationales");
  }
  for (int i = 0; i < 4; ++i) {
    inst.answers[static_cast<size_t>(i)] = ans.at(static_cast<size_t>(i)).get<std::vector<int>>();
    inst.rationales[static_cast<size_t>(i)] = rat.at(static_cast<size_t>(i)).get<std::vector<int>>();
  }
  inst.answer_label = j.at("answer_label").get<int>();
  inst.rationale_label = j.at("rationale_label").get<int>();
  inst.evidence = j.at("evidence").get<int>();
  if (inst.answer_label < 0 || inst.answer_label > 3 || inst.rationale_label < 0 ||
      inst.rationale_label > 3) {
    throw DataError("candidate label out of range");
  }
  if (inst.evidence < 0 || inst.evidence >= n) {
    throw DataError("evidence index out of range");
  }
  return inst;
}

}  // namespace

Instance gen_instance(SplitMix64& rng, const GenConfig& cfg) {
  validate(cfg);
  const int n = cfg.objects;

  std::vector<int> colors(8), shapes(8);
  std::iota(colors.begin(), colors.end(), 0);
  std::iota(shapes.begin(), shapes.end(), 0);
  fisher_yates(colors, rng);
  fisher_yates(shapes, rng);
  // Object i gets colors[i], shapes[i]: both all-distinct within the
  // instance, so the question's shape token has exactly one referent and no
  // distractor answer can collide with the gold color.

  Instance inst;
  inst.objects = Tensor::zeros({n, kObjectFeatureDim});
  for (int i = 0; i < n; ++i) {
    inst.objects.at(i, colors[static_cast<size_t>(i)]) = 1.0;
    inst.objects.at(i, 8 + shapes[static_cast<size_t>(i)]) = 1.0;
    for (int d = 0; d < kObjectFeatureDim; ++d) {
      inst.objects.at(i, d) += cfg.noise_sigma * rng.gaussian();
    }
  }

  const int evidence = rng.below(n);
  inst.evidence = evidence;
  inst.question = {tokens::kAsk, tokens::kColor,
                   tokens::kShapeBase + shapes[static_cast<size_t>(evidence)]};

  const CandidateLayout ans = layout_candidates(n, evidence, rng);
  for (int slot = 0; slot < 4; ++slot) {
    const int obj = ans.slot_object[static_cast<size_t>(slot)];
    inst.answers[static_cast<size_t>(slot)] = {tokens::kColorBase + colors[static_cast<size_t>(obj)]};
  }
  inst.answer_label = ans.gold_slot;

  const CandidateLayout rat = layout_candidates(n, evidence, rng);
  for (int slot = 0; slot < 4; ++slot) {
    const int obj = rat.slot_object[static_cast<size_t>(slot)];
    inst.rationales[static_cast<size_t>(slot)] = {tokens::kBecause, tokens::kTagBase + obj,
                                                  tokens::kIs,
                                                  tokens::kColorBase + colors[static_cast<size_t>(obj)]};
  }
  inst.rationale_label = rat.gold_slot;
  return inst;
}

std::vector<Instance> generate_dataset(const GenConfig& cfg) {
  validate(cfg);
  SplitMix64 rng(cfg.seed);
  std::vector<Instance> out;
  out.reserve(static_cast<size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) out.push_back(gen_instance(rng, cfg));
  return out;
}

void write_instances(const std::string& path, const std::vector<Instance>& instances) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  for (const Instance& inst : instances) {
    f << instance_to_json(inst).dump() << "\n";
  }
}

void write_dataset(const std::string& path, const GenConfig& cfg) {
  write_instances(path, generate_dataset(cfg));
}

std::vector<Instance> read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for reading");
  std::vector<Instance> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

OraclePrediction solve_by_shape_lookup(const Instance& inst) {
  OraclePrediction pred;
  if (inst.question.size() != 3) return pred;
  const int shape_token = inst.question[2];
  const int n = inst.object_count();

  // The shape one-hot block survives noise as the argmax of dims 8..15.
  int referent = -1;
  for (int i = 0; i < n; ++i) {
    int best_dim = 0;
    double best = inst.objects.at(i, 8);
    for (int d = 1; d < 8; ++d) {
      if (inst.objects.at(i, 8 + d) > best) {
        best = inst.objects.at(i, 8 + d);
        best_dim = d;
      }
    }
    if (tokens::kShapeBase + best_dim == shape_token) {
      referent = i;
      break;
    }
  }
  if (referent < 0) return pred;

  int best_color = 0;
  double best = inst.objects.at(referent, 0);
  for (int d = 1; d < 8; ++d) {
    if (inst.objects.at(referent, d) > best) {
      best = inst.objects.at(referent, d);
      best_color = d;
    }
  }
  for (int i = 0; i < 4; ++i) {
    const auto& a = inst.answers[static_cast<size_t>(i)];
    if (a.size() == 1 && a[0] == tokens::kColorBase + best_color) pred.answer = i;
  }
  for (int i = 0; i < 4; ++i) {
    const auto& r = inst.rationales[static_cast<size_t>(i)];
    if (r.size() == 4 && r[1] == tokens::kTagBase + referent) pred.rationale = i;
  }
  return pred;
}

}  // namespace attnalign
