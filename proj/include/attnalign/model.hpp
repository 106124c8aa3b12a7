#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "attnalign/align.hpp"
#include "attnalign/rng.hpp"
#include "attnalign/synth.hpp"
#include "attnalign/tensor.hpp"

#include "json.hpp"

namespace attnalign {

enum class Process { QToA, QAToR };

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

// Forward-only view of one instance, used by evaluation and diagnostics.
// Attention stacks are [L x N]; the vanilla model has L = 1.
struct InstanceOutputs {
  std::array<double, 4> logits_qa{};
  std::array<double, 4> logits_qar{};
  Tensor stack_qa_gold;
  Tensor stack_qar_gold;
};

// Mean loss components over a batch plus gradients in params() order.
struct BatchGradients {
  double l_qa = 0.0;
  double l_qar = 0.0;
  double l_align = 0.0;
  std::vector<Tensor> grads;
};

class Model {
 public:
  virtual ~Model() = default;
  virtual std::string variant() const = 0;
  // Stable-ordered registry; checkpointing, Adam and gradient packing all
  // key off this order.
  virtual std::vector<NamedParam> params() = 0;
  virtual void init(SplitMix64& rng) = 0;
  virtual InstanceOutputs eval_instance(const Instance& inst) const = 0;
  virtual BatchGradients batch_gradients(const std::vector<const Instance*>& batch,
                                         const AlignConfig& cfg) const = 0;
  virtual nlohmann::json config_json() const = 0;
};

std::unique_ptr<Model> make_model(const std::string& variant);
std::unique_ptr<Model> make_model(const std::string& variant, const nlohmann::json& config);

// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] where fan_in is the leading
// dimension; the draw order is the tensor's row-major element order.
void init_uniform(Tensor& t, SplitMix64& rng);

}  // namespace attnalign
