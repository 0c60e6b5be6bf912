#pragma once

// Causal corruption experiment: substitute hidden states between streams at
// random positions and compare paired scores against an uncorrupted run.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ndlab/config.hpp"
#include "ndlab/diversity.hpp"
#include "ndlab/model.hpp"
#include "ndlab/rng.hpp"
#include "ndlab/stats.hpp"
#include "ndlab/tensor.hpp"

namespace ndlab::intervention {

struct CorruptionConfig {
  /// 1-based layer whose output is substituted; 0 means the design layer.
  std::size_t hook_layer = 0;
  double fraction = 0.25;
  /// Streams that receive substitutions; empty means all of them.
  std::vector<std::size_t> target_streams;
  /// Fixed donor stream; otherwise a uniformly random other stream per position.
  std::optional<std::size_t> donor;
  std::uint64_t seed = 0;
  /// Baseline and corrupted arms share sample indices.
  bool paired = true;

  void validate(std::size_t streams) const;
  std::size_t resolved_hook(const model::NdModel& m) const;
};

/// Donor table for `positions` flattened positions per stream.
model::CorruptionPlan make_plan(std::size_t streams, std::size_t positions, std::size_t hook_layer,
                                const CorruptionConfig& cfg, Rng& rng);

/// Value-level substitution on per-stream states ([..., d], equal shapes).
/// Donor values are taken from the uncorrupted inputs.
std::vector<Tensor> corrupt_streams(const std::vector<Tensor>& states, const CorruptionConfig& cfg);

struct PairedEvalConfig {
  CorruptionConfig corruption;
  std::size_t sub_experiments = 4;
  std::size_t samples = 128;
  std::size_t seq = 32;
  std::size_t eval_batch = 16;
  /// Added to every corrupted score; a planting oracle for the test battery.
  double planted_shift = 0.0;
  /// Continuation tokens compared against a distractor in the choice probe.
  std::size_t probe_tokens = 8;
  diversity::WhiteningMode whitening = diversity::WhiteningMode::kFull;

  void validate() const;
};

struct SubExperiment {
  std::size_t index = 0;
  std::vector<std::size_t> sample_indices;
  std::vector<double> baseline;
  std::vector<double> corrupted;
  std::vector<double> delta;
  double dspec_baseline = 0.0;
  double dspec_corrupted = 0.0;
  double delta_dspec = 0.0;
  TTestResult test;
  /// Two-choice probe: the true continuation must outscore a distractor.
  double probe_acc_baseline = 0.0;
  double probe_acc_corrupted = 0.0;
  std::uint64_t probe_b = 0;  // right at baseline, wrong when corrupted
  std::uint64_t probe_c = 0;  // wrong at baseline, right when corrupted
  McNemarResult probe_test;

  std::size_t n() const { return delta.size(); }
};

struct PairedResult {
  std::vector<SubExperiment> subs;
  /// Absent when some sub-experiment p is 0 (degenerate or underflowed).
  std::optional<FisherResult> combined;
  double mean_delta = 0.0;
  double mean_delta_dspec = 0.0;
  std::string note;
};

/// Scores are exp(-mean token CE) per sample. `eval_rows` are token rows of
/// length >= seq + 1 (the first token is the BOS input).
PairedResult paired_eval(const model::NdModel& m,
                         const std::vector<std::vector<std::size_t>>& eval_rows,
                         const PairedEvalConfig& cfg);

void write_intervention_csv(const std::filesystem::path& path, const PairedResult& r);
void write_combined_csv(const std::filesystem::path& path, const PairedResult& r);

void write_corrupt_config(const PairedEvalConfig& cfg, KvConfig& out);
PairedEvalConfig read_corrupt_config(const KvConfig& c);

}  // namespace ndlab::intervention
