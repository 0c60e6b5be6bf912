#pragma once

// Objective, optimizer, schedule, synthetic corpus and the training loop.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndlab/autodiff.hpp"
#include "ndlab/config.hpp"
#include "ndlab/diversity.hpp"
#include "ndlab/model.hpp"
#include "ndlab/rng.hpp"

namespace ndlab::training {

// -- corpus -----------------------------------------------------------------

/// Seeded byte sequences built from a small set of templates with per-token
/// noise, so there is memorizable structure for the streams to pick up.
struct CorpusSpec {
  std::size_t n_templates = 12;
  std::size_t template_min = 6;
  std::size_t template_max = 16;
  std::size_t n_train = 512;
  std::size_t n_eval = 64;
  /// Tokens per sequence, including the leading BOS; one more than the model
  /// sequence length so inputs and shifted targets both fit.
  std::size_t length = 129;
  double noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Batch {
  Tensor tokens;   // [B, T]
  Tensor targets;  // [B, T]
  std::vector<std::size_t> indices;
};

class Corpus {
 public:
  explicit Corpus(const CorpusSpec& spec);

  const CorpusSpec& spec() const { return spec_; }
  const std::vector<std::vector<std::size_t>>& train() const { return train_; }
  const std::vector<std::vector<std::size_t>>& eval() const { return eval_; }
  std::size_t token_count() const;

  /// Rows picked uniformly from the training split.
  Batch sample(std::size_t batch, std::size_t seq, Rng& rng) const;
  /// Rows `first .. first+batch` of a split (wrapping around).
  Batch slice(bool eval_split, std::size_t first, std::size_t batch, std::size_t seq) const;
  Batch rows(bool eval_split, std::span<const std::size_t> indices, std::size_t seq) const;

 private:
  CorpusSpec spec_;
  std::vector<std::vector<std::size_t>> train_;
  std::vector<std::vector<std::size_t>> eval_;
};

// -- configuration ------------------------------------------------------------

enum class BtVariant { kFull, kRandK };
const char* to_string(BtVariant v);
BtVariant parse_bt_variant(const std::string& text);

struct TrainConfig {
  model::AdapterConfig adapters;
  double lambda_bt = 0.01;
  BtVariant bt_variant = BtVariant::kFull;
  diversity::RandKConfig randk;
  double peak_lr = 3e-4;
  double warmup_frac = 0.02;
  std::size_t total_steps = 2000;
  std::size_t batch = 16;
  std::size_t seq = 128;
  double dropout = 0.0;
  double weight_decay = 0.01;
  std::size_t log_every = 50;
  /// Rows of the eval split used for held-out metrics.
  std::size_t eval_rows = 32;
  diversity::WhiteningMode whitening = diversity::WhiteningMode::kFull;
  Precision precision = Precision::kDouble;
  std::uint64_t seed = 0;

  void validate(const model::BackboneConfig& backbone) const;
};

/// Named ablation presets layered on a base configuration.
enum class Arm { kStandard, kParScale, kStreamLora, kNdLora, kDropout };
const char* to_string(Arm a);
Arm parse_arm(const std::string& text);
TrainConfig apply_arm(TrainConfig cfg, Arm arm);

void write_train_config(const TrainConfig& cfg, KvConfig& out);
TrainConfig read_train_config(const KvConfig& c);

// -- objective --------------------------------------------------------------

struct LossVars {
  ad::Var total;
  ad::Var ce;
  std::optional<ad::Var> bt;
  std::size_t pair_evaluations = 0;
};

/// CE + λ·BT on a built forward graph. With λ = 0 or P = 1 the total is the
/// CE node itself.
LossVars total_loss(model::ForwardGraph& fg, const TrainConfig& cfg,
                    std::span<const diversity::StreamPair> pairs);

struct LossValues {
  double total = 0.0;
  double ce = 0.0;
  double bt = 0.0;
};

/// Value-level objective from logits [.., V], targets and raw features.
LossValues total_loss(const Tensor& logits, const Tensor& targets,
                      const diversity::FeatureBatch& features, const TrainConfig& cfg);

// -- schedule and optimizer ---------------------------------------------------

/// Linear warmup over warmup_frac·total steps, then cosine decay to 0.
double lr_at(std::size_t step, double peak, double warmup_frac, std::size_t total);
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  return lr_at(step, cfg.peak_lr, cfg.warmup_frac, cfg.total_steps);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::size_t t = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

struct StepReport {
  bool applied = false;
  std::string rejected_parameter;  // first parameter with a non-finite gradient
};

/// Decoupled weight decay on adapter and aggregator groups only. A non-finite
/// gradient anywhere leaves parameters and state untouched.
StepReport adamw_step(model::ParameterStore& params, const ad::Gradients& grads, AdamState& state,
                      double lr, const AdamWConfig& cfg);

// -- pretraining and training -------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct PretrainConfig {
  std::size_t steps = 300;
  double peak_lr = 3e-3;
  double warmup_frac = 0.05;
  std::size_t batch = 16;
  std::size_t seq = 64;
  std::size_t eval_rows = 32;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  double initial_eval_ce = 0.0;
  double final_eval_ce = 0.0;
  std::size_t steps = 0;
};

/// Trains the bare backbone, then freezes it. Throws DivergenceError on a
/// non-finite loss.
PretrainReport pretrain_backbone(model::NdModel& backbone, const Corpus& corpus,
                                 const PretrainConfig& cfg);

struct EvalMetrics {
  double ce = 0.0;
  std::optional<double> d_spec;
  std::vector<diversity::PairNorm> pair_norms;
  double alpha_min = 1.0;
  double alpha_max = 1.0;
};

/// Held-out CE and diversity on the first `rows` eval sequences.
EvalMetrics evaluate_model(const model::NdModel& model, const Corpus& corpus, std::size_t rows,
                           std::size_t seq,
                           diversity::WhiteningMode mode = diversity::WhiteningMode::kFull);

struct TraceRow {
  std::size_t step = 0;
  double lr = 0.0;
  double ce = 0.0;
  double bt = 0.0;
  double total = 0.0;
  double d_spec = 0.0;
  double alpha_min = 1.0;
  double alpha_max = 1.0;
};

enum class TrainStatus { kCompleted, kDiverged };

struct TrainResult {
  TrainStatus status = TrainStatus::kCompleted;
  std::size_t steps_run = 0;
  std::vector<TraceRow> trace;
  std::vector<diversity::DiversityTraceRow> diversity_trace;
  EvalMetrics initial;
  EvalMetrics final;
  std::string message;
};

/// Runs the configured number of steps on a model whose backbone is frozen.
/// On divergence the model is restored to the last parameters that produced
/// a finite loss.
TrainResult train(model::NdModel& model, const Corpus& corpus, const TrainConfig& cfg);

void write_train_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows,
                           bool diversity_columns);

}  // namespace ndlab::training
