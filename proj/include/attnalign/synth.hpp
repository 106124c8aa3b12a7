#pragma once

#include <array>
#include <string>
#include <vector>

#include "attnalign/rng.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

// Fixed token-id layout. Datasets are portable across implementations only
// because these ids never move.
namespace tokens {
constexpr int kPad = 0;
constexpr int kCls = 1;
constexpr int kSep = 2;
constexpr int kEnd = 3;
constexpr int kAsk = 4;
constexpr int kColor = 5;
constexpr int kBecause = 6;
constexpr int kIs = 7;
constexpr int kColorBase = 8;   // 8..15
constexpr int kShapeBase = 16;  // 16..23
constexpr int kTagBase = 24;    // 24..31, tag i refers to object i
constexpr int kVocab = 32;

inline bool is_tag(int id) { return id >= kTagBase && id < kTagBase + 8; }
inline int tag_object(int id) { return id - kTagBase; }
}  // namespace tokens

// One paired multiple-choice item. The planted evidence object determines
// both gold choices; `evidence` exists for diagnostics only and is never an
// input to any forward pass or loss.
struct Instance {
  Tensor objects;  // [N x 16]: onehot(color) ++ onehot(shape), plus noise
  std::vector<int> question;
  std::array<std::vector<int>, 4> answers;
  std::array<std::vector<int>, 4> rationales;
  int answer_label = 0;
  int rationale_label = 0;
  int evidence = 0;

  int object_count() const { return objects.shape[0]; }
};

struct GenConfig {
  uint64_t seed = 0;
  int count = 0;
  int objects = 6;        // N, at most 8 (tag-token space)
  double noise_sigma = 0.1;
};

constexpr int kObjectFeatureDim = 16;

// Draws one instance from the stream. The rng consumption order is fixed:
// color shuffle, shape shuffle, per-object noise (16 gaussians each),
// evidence pick, answer distractor shuffle, answer position shuffle,
// rationale distractor shuffle, rationale position shuffle.
Instance gen_instance(SplitMix64& rng, const GenConfig& cfg);

std::vector<Instance> generate_dataset(const GenConfig& cfg);

// Line-delimited records, one JSON object per instance. Identical config ->
// byte-identical file; read(write(x)) == x including float bits.
void write_dataset(const std::string& path, const GenConfig& cfg);
void write_instances(const std::string& path, const std::vector<Instance>& instances);
std::vector<Instance> read_dataset(const std::string& path);

// Brute-force solver that matches the question's shape token to the unique
// object carrying it and reads off that object's color. Used to prove label
// consistency; never part of any model.
struct OraclePrediction {
  int answer = -1;
  int rationale = -1;
};
OraclePrediction solve_by_shape_lookup(const Instance& inst);

}  // namespace attnalign
