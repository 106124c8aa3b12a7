#pragma once

#include <string>
#include <vector>

#include "attnalign/model.hpp"

#include "json.hpp"

namespace attnalign {

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

// Hex-float (%a) encoding: text-based yet bit-exact for 64-bit values.
std::string double_to_hex(double v);
double hex_to_double(const std::string& s);

// One JSON document holding the run config, epoch counter, optimizer moments
// and every parameter tensor as (name, shape, hex values) in params() order.
void save_checkpoint(const std::string& path, Model& model, const nlohmann::json& run_config,
                     int epoch, const AdamState& opt);

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  nlohmann::json run_config;
  int epoch = 0;
  AdamState opt;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace attnalign
