#include "ndlab/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ndlab/csv.hpp"

namespace ndlab::intervention {

void CorruptionConfig::validate(std::size_t streams) const {
  if (streams < 2) throw std::invalid_argument("corruption needs at least 2 streams");
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("corruption fraction outside [0, 1]");
  }
  for (std::size_t t : target_streams) {
    if (t >= streams) throw std::invalid_argument("corruption target stream out of range");
    if (donor && *donor == t) throw std::invalid_argument("a stream cannot donate to itself");
  }
  if (donor && *donor >= streams) throw std::invalid_argument("donor stream out of range");
  if (donor && target_streams.empty()) {
    throw std::invalid_argument("a fixed donor needs explicit target streams");
  }
}

std::size_t CorruptionConfig::resolved_hook(const model::NdModel& m) const {
  const std::size_t h = hook_layer == 0 ? m.adapters.design_layer : hook_layer;
  if (h > m.backbone.layers) throw std::invalid_argument("hook layer exceeds the backbone depth");
  return h;
}

model::CorruptionPlan make_plan(std::size_t streams, std::size_t positions, std::size_t hook_layer,
                                const CorruptionConfig& cfg, Rng& rng) {
  cfg.validate(streams);
  model::CorruptionPlan plan;
  plan.hook_layer = hook_layer;
  plan.donor.assign(streams, std::vector<int>(positions, -1));
  std::vector<std::size_t> targets = cfg.target_streams;
  if (targets.empty()) {
    targets.resize(streams);
    std::iota(targets.begin(), targets.end(), 0);
  }
  const auto count = static_cast<std::size_t>(std::llround(cfg.fraction * positions));
  std::uniform_int_distribution<std::size_t> other(0, streams - 2);
  for (std::size_t i : targets) {
    std::vector<std::size_t> order(positions);
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first `count` entries are the chosen positions.
    for (std::size_t k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, positions - 1);
      std::swap(order[k], order[pick(rng)]);
    }
    for (std::size_t k = 0; k < count; ++k) {
      std::size_t d;
      if (cfg.donor) {
        d = *cfg.donor;
      } else {
        d = other(rng);
        if (d >= i) ++d;
      }
      plan.donor[i][order[k]] = static_cast<int>(d);
    }
  }
  return plan;
}

std::vector<Tensor> corrupt_streams(const std::vector<Tensor>& states, const CorruptionConfig& cfg) {
  if (states.size() < 2) throw std::invalid_argument("corrupt_streams: need at least 2 streams");
  const Shape& s = states[0].shape();
  if (s.empty()) throw std::invalid_argument("corrupt_streams: scalar states");
  for (const Tensor& t : states) {
    if (t.shape() != s) throw std::invalid_argument("corrupt_streams: stream shapes differ");
  }
  const std::size_t d = s.back();
  const std::size_t positions = states[0].size() / d;
  Rng rng = make_rng(cfg.seed, "corruption");
  const model::CorruptionPlan plan = make_plan(states.size(), positions, 1, cfg, rng);
  std::vector<Tensor> out = states;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t n = 0; n < positions; ++n) {
      const int donor = plan.donor[i][n];
      if (donor < 0) continue;
      std::copy_n(states[donor].data().begin() + n * d, d, out[i].data().begin() + n * d);
    }
  }
  return out;
}

void PairedEvalConfig::validate() const {
  if (sub_experiments == 0) throw std::invalid_argument("need at least one sub-experiment");
  if (samples < 2) throw std::invalid_argument("need at least 2 samples per sub-experiment");
  if (seq == 0 || eval_batch == 0) throw std::invalid_argument("seq and eval_batch must be positive");
  if (probe_tokens == 0 || probe_tokens > seq) {
    throw std::invalid_argument("probe_tokens must be in [1, seq]");
  }
  if (!std::isfinite(planted_shift)) throw std::invalid_argument("planted_shift must be finite");
}

namespace {

struct ArmOutput {
  std::vector<double> scores;
  std::vector<bool> probe_correct;
  std::vector<Tensor> features;  // per stream, [rows, d]
};

// log p(target) at every position of a [B, T, V] logit tensor.
double log_prob(const Tensor& logits, std::size_t row, std::size_t t, std::size_t token) {
  const std::size_t T = logits.dim(1), V = logits.dim(2);
  const double* z = logits.data().data() + (row * T + t) * V;
  const double mx = *std::max_element(z, z + V);
  double s = 0.0;
  for (std::size_t v = 0; v < V; ++v) s += std::exp(z[v] - mx);
  return z[token] - mx - std::log(s);
}

ArmOutput run_arm(const model::NdModel& m, const std::vector<std::vector<std::size_t>>& rows,
                  const std::vector<std::size_t>& indices,
                  const std::vector<std::size_t>& distractors, const PairedEvalConfig& cfg,
                  Rng* corruption_rng) {
  const std::size_t P = m.P(), d = m.backbone.d, T = cfg.seq;
  ArmOutput out;
  std::vector<std::vector<double>> feats(P);
  const std::size_t hook = cfg.corruption.resolved_hook(m);
  for (std::size_t first = 0; first < indices.size(); first += cfg.eval_batch) {
    const std::size_t B = std::min(cfg.eval_batch, indices.size() - first);
    Tensor tokens({B, T});
    for (std::size_t r = 0; r < B; ++r) {
      const auto& row = rows[indices[first + r]];
      for (std::size_t t = 0; t < T; ++t) tokens.at(r, t) = static_cast<double>(row[t]);
    }
    model::LmOutput lm;
    if (corruption_rng) {
      const model::CorruptionPlan plan = make_plan(P, B * T, hook, cfg.corruption, *corruption_rng);
      lm = model::lm_forward(m, tokens, &plan);
    } else {
      lm = model::lm_forward(m, tokens);
    }
    for (std::size_t r = 0; r < B; ++r) {
      const auto& row = rows[indices[first + r]];
      const auto& dis = rows[distractors[first + r]];
      double nll = 0.0;
      for (std::size_t t = 0; t < T; ++t) nll -= log_prob(lm.logits, r, t, row[t + 1]);
      out.scores.push_back(std::exp(-nll / static_cast<double>(T)));
      double ll_true = 0.0, ll_dis = 0.0;
      for (std::size_t t = T - cfg.probe_tokens; t < T; ++t) {
        ll_true += log_prob(lm.logits, r, t, row[t + 1]);
        ll_dis += log_prob(lm.logits, r, t, dis[t + 1]);
      }
      out.probe_correct.push_back(ll_true > ll_dis);
    }
    for (std::size_t i = 0; i < P; ++i) {
      const auto& f = lm.design_features[i].storage();
      feats[i].insert(feats[i].end(), f.begin(), f.end());
    }
  }
  for (auto& f : feats) {
    const std::size_t n = f.size() / d;
    out.features.emplace_back(Shape{n, d}, std::move(f));
  }
  return out;
}

double batch_dspec(std::vector<Tensor> features, diversity::WhiteningMode mode) {
  diversity::FeatureBatch raw;
  raw.streams = std::move(features);
  return diversity::d_spec(diversity::whiten(raw, mode));
}

}  // namespace

PairedResult paired_eval(const model::NdModel& m,
                         const std::vector<std::vector<std::size_t>>& eval_rows,
                         const PairedEvalConfig& cfg) {
  cfg.validate();
  cfg.corruption.validate(m.P());
  cfg.corruption.resolved_hook(m);
  if (eval_rows.empty()) throw std::invalid_argument("paired_eval: empty eval set");
  for (const auto& row : eval_rows) {
    if (row.size() < cfg.seq + 1) throw std::invalid_argument("paired_eval: eval rows shorter than seq + 1");
  }
  PairedResult result;
  std::vector<double> pvals;
  for (std::size_t k = 0; k < cfg.sub_experiments; ++k) {
    const std::uint64_t sub_seed = derive_seed(cfg.corruption.seed, k);
    Rng sample_rng = make_rng(sub_seed, "samples");
    Rng unpaired_rng = make_rng(sub_seed, "samples-unpaired");
    Rng probe_rng = make_rng(sub_seed, "probe");
    Rng corruption_rng = make_rng(sub_seed, "corruption");
    std::uniform_int_distribution<std::size_t> pick(0, eval_rows.size() - 1);
    SubExperiment sub;
    sub.index = k;
    std::vector<std::size_t> distractors(cfg.samples);
    sub.sample_indices.resize(cfg.samples);
    for (std::size_t n = 0; n < cfg.samples; ++n) {
      sub.sample_indices[n] = pick(sample_rng);
      distractors[n] = pick(probe_rng);
      if (eval_rows.size() > 1) {
        while (distractors[n] == sub.sample_indices[n]) distractors[n] = pick(probe_rng);
      }
    }
    std::vector<std::size_t> corrupted_indices = sub.sample_indices;
    if (!cfg.corruption.paired) {
      for (auto& i : corrupted_indices) i = pick(unpaired_rng);
    }
    ArmOutput base = run_arm(m, eval_rows, sub.sample_indices, distractors, cfg, nullptr);
    ArmOutput corr = run_arm(m, eval_rows, corrupted_indices, distractors, cfg, &corruption_rng);
    sub.baseline = base.scores;
    sub.corrupted = corr.scores;
    for (double& s : sub.corrupted) s += cfg.planted_shift;
    for (std::size_t n = 0; n < cfg.samples; ++n) sub.delta.push_back(sub.corrupted[n] - sub.baseline[n]);
    sub.dspec_baseline = batch_dspec(std::move(base.features), cfg.whitening);
    sub.dspec_corrupted = batch_dspec(std::move(corr.features), cfg.whitening);
    sub.delta_dspec = sub.dspec_corrupted - sub.dspec_baseline;
    sub.test = paired_t_test(sub.delta);
    std::size_t right_b = 0, right_c = 0;
    for (std::size_t n = 0; n < cfg.samples; ++n) {
      right_b += base.probe_correct[n];
      right_c += corr.probe_correct[n];
      sub.probe_b += base.probe_correct[n] && !corr.probe_correct[n];
      sub.probe_c += !base.probe_correct[n] && corr.probe_correct[n];
    }
    sub.probe_acc_baseline = static_cast<double>(right_b) / static_cast<double>(cfg.samples);
    sub.probe_acc_corrupted = static_cast<double>(right_c) / static_cast<double>(cfg.samples);
    sub.probe_test = mcnemar_test(sub.probe_b, sub.probe_c);
    result.mean_delta += sub.test.mean / static_cast<double>(cfg.sub_experiments);
    result.mean_delta_dspec += sub.delta_dspec / static_cast<double>(cfg.sub_experiments);
    pvals.push_back(sub.test.p);
    result.subs.push_back(std::move(sub));
  }
  if (std::all_of(pvals.begin(), pvals.end(), [](double p) { return p > 0.0; })) {
    result.combined = fisher_combine(pvals);
  } else {
    result.note = "a sub-experiment has p = 0 (zero-variance deltas); Fisher combination skipped";
  }
  return result;
}

void write_intervention_csv(const std::filesystem::path& path, const PairedResult& r) {
  CsvWriter w(path, {"subexp", "n", "delta_dspec", "mean_delta", "t", "p"});
  for (const SubExperiment& s : r.subs) {
    w.cell(s.index).cell(s.n()).cell(s.delta_dspec).cell(s.test.mean).cell(s.test.t).cell(s.test.p);
    w.end_row();
  }
}

void write_combined_csv(const std::filesystem::path& path, const PairedResult& r) {
  CsvWriter w(path, {"chi2", "dof", "p"});
  if (r.combined) {
    w.cell(r.combined->chi2).cell(r.combined->dof).cell(r.combined->p);
  } else {
    w.cell(std::string()).cell(2 * r.subs.size()).cell(std::string());
  }
  w.end_row();
}

void write_corrupt_config(const PairedEvalConfig& cfg, KvConfig& c) {
  c.set("corrupt.hook_layer", cfg.corruption.hook_layer);
  c.set("corrupt.fraction", cfg.corruption.fraction);
  std::string targets;
  for (std::size_t i = 0; i < cfg.corruption.target_streams.size(); ++i) {
    if (i) targets += ",";
    targets += std::to_string(cfg.corruption.target_streams[i]);
  }
  c.set("corrupt.targets", targets);
  c.set("corrupt.donor", cfg.corruption.donor ? std::to_string(*cfg.corruption.donor) : "random");
  c.set("corrupt.seed", std::to_string(cfg.corruption.seed));
  c.set("corrupt.paired", cfg.corruption.paired);
  c.set("corrupt.sub_experiments", cfg.sub_experiments);
  c.set("corrupt.samples", cfg.samples);
  c.set("corrupt.seq", cfg.seq);
  c.set("corrupt.eval_batch", cfg.eval_batch);
  c.set("corrupt.planted_shift", cfg.planted_shift);
  c.set("corrupt.probe_tokens", cfg.probe_tokens);
  c.set("corrupt.whitening", diversity::to_string(cfg.whitening));
}

PairedEvalConfig read_corrupt_config(const KvConfig& c) {
  PairedEvalConfig cfg;
  cfg.corruption.hook_layer = c.get_size("corrupt.hook_layer", cfg.corruption.hook_layer);
  cfg.corruption.fraction = c.get_double("corrupt.fraction", cfg.corruption.fraction);
  cfg.corruption.target_streams = c.get_sizes("corrupt.targets", {});
  const std::string donor = c.get_string("corrupt.donor", "random");
  if (donor != "random") cfg.corruption.donor = c.get_size("corrupt.donor", 0);
  cfg.corruption.seed = c.get_u64("corrupt.seed", cfg.corruption.seed);
  cfg.corruption.paired = c.get_bool("corrupt.paired", cfg.corruption.paired);
  cfg.sub_experiments = c.get_size("corrupt.sub_experiments", cfg.sub_experiments);
  cfg.samples = c.get_size("corrupt.samples", cfg.samples);
  cfg.seq = c.get_size("corrupt.seq", cfg.seq);
  cfg.eval_batch = c.get_size("corrupt.eval_batch", cfg.eval_batch);
  cfg.planted_shift = c.get_double("corrupt.planted_shift", cfg.planted_shift);
  cfg.probe_tokens = c.get_size("corrupt.probe_tokens", cfg.probe_tokens);
  cfg.whitening = diversity::parse_whitening_mode(
      c.get_string("corrupt.whitening", diversity::to_string(cfg.whitening)));
  return cfg;
}

}  // namespace ndlab::intervention
