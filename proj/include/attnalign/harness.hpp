#pragma once

#include <string>
#include <vector>

#include "attnalign/checkpoint.hpp"
#include "attnalign/model.hpp"

namespace attnalign {

struct TrainConfig {
  std::string variant = "vanilla";     // vanilla | transformer
  std::string align_mode = "dot";      // none | dot | rank
  double lambda = 1.0;
  double alpha = 10.0;
  double learning_rate = 2e-3;
  int batch_size = 32;
  int epochs = 20;
  uint64_t seed = 1;
  std::string train_data;
  std::string val_data;
  std::string checkpoint;
  int eval_every = 1;

  AlignConfig align() const;
  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);
nlohmann::json train_config_to_json(const TrainConfig& cfg);

// One evaluated epoch. Wall-clock time is tracked for console logging only;
// the emitted CSV contains nothing nondeterministic.
struct EpochRecord {
  int epoch = 0;
  double l_qa = 0.0;
  double l_qar = 0.0;
  double l_align = 0.0;
  double acc_q2a = 0.0;
  double acc_qa2r = 0.0;
  double acc_q2ar = 0.0;
  double gold_pair_sim = 0.0;
  double evidence_mass_qa = 0.0;
  double evidence_mass_qar = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> rows;
};

struct EvalMetrics {
  double acc_q2a = 0.0;
  double acc_qa2r = 0.0;
  double acc_q2ar = 0.0;
  double gold_pair_sim = 0.0;       // layer-mean dot between the gold-pair stacks
  double evidence_mass_qa = 0.0;    // gold map mass on the planted object
  double evidence_mass_qar = 0.0;
};

void init_adam(AdamState& state, const std::vector<NamedParam>& params);

// Standard Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
void adam_step(const std::vector<NamedParam>& params, const std::vector<Tensor>& grads,
               AdamState& state, double learning_rate);

// One gradient computation plus one optimizer update over a batch.
struct StepLosses {
  double l_qa = 0.0;
  double l_qar = 0.0;
  double l_align = 0.0;
  double total(double lambda) const { return l_qa + l_qar + lambda * l_align; }
};
StepLosses training_step(Model& model, const std::vector<const Instance*>& batch,
                         const AlignConfig& cfg, AdamState& state, double learning_rate);

EvalMetrics evaluate(const Model& model, const std::vector<Instance>& dataset);

int argmax4(const std::array<double, 4>& logits);  // ties break to the lowest index

// Full seeded loop: init, shuffle, step, evaluate per cadence, checkpoint.
// Aborts with NumericError on a non-finite loss, keeping the last good
// checkpoint on disk.
TrainReport train(const TrainConfig& cfg);

std::string report_csv(const TrainReport& report);
void write_report_csv(const std::string& path, const TrainReport& report);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  long count = 0;
};
// Gold-pair dot similarities bucketed over [0, 1]; counts sum to the
// dataset size.
std::vector<HistogramBin> similarity_histogram(const Model& model,
                                               const std::vector<Instance>& dataset,
                                               int bins);
std::string histogram_csv(const std::vector<HistogramBin>& bins);

struct SweepRow {
  double lambda = 0.0;
  double acc_q2a = 0.0;
  double acc_qa2r = 0.0;
  double acc_q2ar = 0.0;
  double gold_pair_sim = 0.0;
};
// Retrains from scratch per lambda, returning the final-epoch metrics.
std::vector<SweepRow> lambda_sweep(const TrainConfig& base, const std::vector<double>& lambdas);
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace attnalign
