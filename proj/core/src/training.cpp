#include "ndlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "ndlab/csv.hpp"

namespace ndlab::training {

namespace {

// Lowercase letters, space and a little punctuation.
const std::string& alphabet() {
  static const std::string a = "abcdefghijklmnopqrstuvwxyz ,.";
  return a;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

// -- corpus -----------------------------------------------------------------

void CorpusSpec::validate() const {
  if (n_templates == 0) throw std::invalid_argument("corpus: n_templates must be positive");
  if (template_min == 0 || template_max < template_min) {
    throw std::invalid_argument("corpus: need 0 < template_min <= template_max");
  }
  if (n_train == 0 || n_eval == 0) throw std::invalid_argument("corpus: empty split");
  if (length < 2) throw std::invalid_argument("corpus: length must be at least 2");
  if (!(noise >= 0.0 && noise <= 1.0)) throw std::invalid_argument("corpus: noise outside [0, 1]");
}

Corpus::Corpus(const CorpusSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng = make_rng(spec_.seed, "corpus");
  const std::string& abc = alphabet();
  std::uniform_int_distribution<std::size_t> letter(0, abc.size() - 1);
  std::uniform_int_distribution<std::size_t> tlen(spec_.template_min, spec_.template_max);
  std::vector<std::vector<std::size_t>> templates(spec_.n_templates);
  for (auto& t : templates) {
    const std::size_t n = tlen(rng);
    for (std::size_t k = 0; k + 1 < n; ++k) t.push_back(static_cast<unsigned char>(abc[letter(rng)]));
    t.push_back(static_cast<unsigned char>(' '));
  }
  std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 1);
  std::uniform_int_distribution<std::size_t> any_byte(0, model::kByteVocab - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto make_row = [&] {
    std::vector<std::size_t> row{model::kBos};
    while (row.size() < spec_.length) {
      for (std::size_t tok : templates[pick(rng)]) {
        if (row.size() == spec_.length) break;
        row.push_back(unit(rng) < spec_.noise ? any_byte(rng) : tok);
      }
    }
    return row;
  };
  for (std::size_t i = 0; i < spec_.n_train; ++i) train_.push_back(make_row());
  for (std::size_t i = 0; i < spec_.n_eval; ++i) eval_.push_back(make_row());
}

std::size_t Corpus::token_count() const {
  return (train_.size() + eval_.size()) * spec_.length;
}

Batch Corpus::rows(bool eval_split, std::span<const std::size_t> indices, std::size_t seq) const {
  const auto& split = eval_split ? eval_ : train_;
  if (seq == 0 || seq + 1 > spec_.length) {
    throw std::invalid_argument("corpus: seq " + std::to_string(seq) +
                                " does not fit sequences of length " +
                                std::to_string(spec_.length));
  }
  if (indices.empty()) throw std::invalid_argument("corpus: empty batch");
  Batch b;
  b.tokens = Tensor({indices.size(), seq});
  b.targets = Tensor({indices.size(), seq});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& row = split.at(indices[r]);
    for (std::size_t t = 0; t < seq; ++t) {
      b.tokens.at(r, t) = static_cast<double>(row[t]);
      b.targets.at(r, t) = static_cast<double>(row[t + 1]);
    }
  }
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

Batch Corpus::sample(std::size_t batch, std::size_t seq, Rng& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = pick(rng);
  return rows(false, idx, seq);
}

Batch Corpus::slice(bool eval_split, std::size_t first, std::size_t batch, std::size_t seq) const {
  const std::size_t n = eval_split ? eval_.size() : train_.size();
  std::vector<std::size_t> idx(batch);
  for (std::size_t k = 0; k < batch; ++k) idx[k] = (first + k) % n;
  return rows(eval_split, idx, seq);
}

// -- configuration ------------------------------------------------------------

const char* to_string(BtVariant v) { return v == BtVariant::kFull ? "full" : "randk"; }

BtVariant parse_bt_variant(const std::string& text) {
  if (text == "full") return BtVariant::kFull;
  if (text == "randk" || text == "rand-k" || text == "RandK") return BtVariant::kRandK;
  throw std::invalid_argument("unknown BT variant '" + text + "' (full, randk)");
}

void TrainConfig::validate(const model::BackboneConfig& backbone) const {
  adapters.validate(backbone);
  if (!(lambda_bt >= 0.0) || !std::isfinite(lambda_bt)) {
    throw std::invalid_argument("lambda_bt must be finite and non-negative");
  }
  if (bt_variant == BtVariant::kRandK && adapters.P >= 2) randk.validate(adapters.P);
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw std::invalid_argument("peak_lr must be positive");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw std::invalid_argument("warmup_frac outside [0, 1)");
  if (total_steps == 0) throw std::invalid_argument("total_steps must be positive");
  if (batch == 0 || seq == 0) throw std::invalid_argument("batch and seq must be positive");
  if (seq + adapters.n_prefix * (adapters.prefix_mode == model::PrefixMode::kInput) > backbone.max_seq) {
    throw std::invalid_argument("seq exceeds the backbone context");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout outside [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (log_every == 0) throw std::invalid_argument("log_every must be positive");
  if (eval_rows == 0) throw std::invalid_argument("eval_rows must be positive");
}

const char* to_string(Arm a) {
  switch (a) {
    case Arm::kStandard: return "standard";
    case Arm::kParScale: return "parscale";
    case Arm::kStreamLora: return "stream-lora";
    case Arm::kNdLora: return "nd-lora";
    case Arm::kDropout: return "dropout";
  }
  return "?";
}

Arm parse_arm(const std::string& text) {
  for (Arm a : {Arm::kStandard, Arm::kParScale, Arm::kStreamLora, Arm::kNdLora, Arm::kDropout}) {
    if (text == to_string(a)) return a;
  }
  throw std::invalid_argument("unknown arm '" + text +
                              "' (standard, parscale, stream-lora, nd-lora, dropout)");
}

TrainConfig apply_arm(TrainConfig cfg, Arm arm) {
  switch (arm) {
    case Arm::kStandard:
      cfg.adapters.P = 1;
      cfg.adapters.shared_lora = false;
      cfg.lambda_bt = 0.0;
      cfg.dropout = 0.0;
      break;
    case Arm::kParScale:
      cfg.adapters.shared_lora = true;
      cfg.lambda_bt = 0.0;
      cfg.dropout = 0.0;
      break;
    case Arm::kStreamLora:
      cfg.adapters.shared_lora = false;
      cfg.lambda_bt = 0.0;
      cfg.dropout = 0.0;
      break;
    case Arm::kNdLora:
      cfg.adapters.shared_lora = false;
      if (cfg.lambda_bt == 0.0) cfg.lambda_bt = 0.01;
      cfg.dropout = 0.0;
      break;
    case Arm::kDropout:
      cfg.adapters.shared_lora = false;
      cfg.lambda_bt = 0.0;
      if (cfg.dropout == 0.0) cfg.dropout = 0.1;
      break;
  }
  return cfg;
}

void write_train_config(const TrainConfig& cfg, KvConfig& c) {
  model::write_adapter_config(cfg.adapters, c);
  c.set("train.lambda_bt", cfg.lambda_bt);
  c.set("train.bt_variant", to_string(cfg.bt_variant));
  c.set("train.randk_k", cfg.randk.K);
  std::string w;
  for (std::size_t i = 0; i < cfg.randk.weights.size(); ++i) {
    if (i) w += ",";
    w += format_double(cfg.randk.weights[i]);
  }
  c.set("train.randk_weights", w);
  c.set("train.peak_lr", cfg.peak_lr);
  c.set("train.warmup_frac", cfg.warmup_frac);
  c.set("train.steps", cfg.total_steps);
  c.set("train.batch", cfg.batch);
  c.set("train.seq", cfg.seq);
  c.set("train.dropout", cfg.dropout);
  c.set("train.weight_decay", cfg.weight_decay);
  c.set("train.log_every", cfg.log_every);
  c.set("train.eval_rows", cfg.eval_rows);
  c.set("train.whitening", diversity::to_string(cfg.whitening));
  c.set("train.precision", cfg.precision == Precision::kSingle ? "single" : "double");
  c.set("train.seed", std::to_string(cfg.seed));
}

TrainConfig read_train_config(const KvConfig& c) {
  TrainConfig cfg;
  cfg.adapters = model::read_adapter_config(c);
  cfg.lambda_bt = c.get_double("train.lambda_bt", cfg.lambda_bt);
  cfg.bt_variant = parse_bt_variant(c.get_string("train.bt_variant", to_string(cfg.bt_variant)));
  cfg.randk.K = c.get_size("train.randk_k", cfg.randk.K);
  cfg.randk.weights = c.get_doubles("train.randk_weights", {});
  cfg.peak_lr = c.get_double("train.peak_lr", cfg.peak_lr);
  cfg.warmup_frac = c.get_double("train.warmup_frac", cfg.warmup_frac);
  cfg.total_steps = c.get_size("train.steps", cfg.total_steps);
  cfg.batch = c.get_size("train.batch", cfg.batch);
  cfg.seq = c.get_size("train.seq", cfg.seq);
  cfg.dropout = c.get_double("train.dropout", cfg.dropout);
  cfg.weight_decay = c.get_double("train.weight_decay", cfg.weight_decay);
  cfg.log_every = c.get_size("train.log_every", cfg.log_every);
  cfg.eval_rows = c.get_size("train.eval_rows", cfg.eval_rows);
  cfg.whitening = diversity::parse_whitening_mode(
      c.get_string("train.whitening", diversity::to_string(cfg.whitening)));
  const std::string prec = c.get_string("train.precision", "double");
  if (prec == "double") {
    cfg.precision = Precision::kDouble;
  } else if (prec == "single") {
    cfg.precision = Precision::kSingle;
  } else {
    throw ConfigError("train.precision must be 'single' or 'double', got '" + prec + "'");
  }
  cfg.seed = c.get_u64("train.seed", cfg.seed);
  cfg.randk.seed = cfg.seed;
  return cfg;
}

// -- objective --------------------------------------------------------------

LossVars total_loss(model::ForwardGraph& fg, const TrainConfig& cfg,
                    std::span<const diversity::StreamPair> pairs) {
  LossVars out;
  out.ce = fg.ce;
  out.total = fg.ce;
  if (fg.design_features.size() < 2 || pairs.empty()) return out;
  diversity::BtTerms bt = diversity::bt_loss_pairs(*fg.graph, fg.design_features, pairs);
  out.bt = bt.loss;
  out.pair_evaluations = bt.pair_evaluations;
  // BT is still computed for logging when λ = 0, but stays off the loss path.
  if (cfg.lambda_bt > 0.0) out.total = fg.ce + ad::scale(bt.loss, cfg.lambda_bt);
  return out;
}

LossValues total_loss(const Tensor& logits, const Tensor& targets,
                      const diversity::FeatureBatch& features, const TrainConfig& cfg) {
  ad::Graph g;
  ad::Var l = g.constant(logits);
  ad::Var t = g.constant(targets);
  ad::Var ce = ad::cross_entropy(l, t);
  const ad::Evaluation ev = ad::evaluate(g, {});
  LossValues out;
  out.ce = ev.value(ce).item();
  if (features.stream_count() >= 2) {
    out.bt = cfg.bt_variant == BtVariant::kFull ? diversity::bt_loss_full(features)
                                                 : diversity::bt_loss_randk(features, cfg.randk);
  }
  out.total = cfg.lambda_bt > 0.0 ? out.ce + cfg.lambda_bt * out.bt : out.ce;
  return out;
}

// -- schedule and optimizer ---------------------------------------------------

double lr_at(std::size_t step, double peak, double warmup_frac, std::size_t total) {
  if (total == 0) throw std::invalid_argument("lr_at: total must be positive");
  if (step > total) {
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " past total " +
                                std::to_string(total));
  }
  const double warm = warmup_frac * static_cast<double>(total);
  const double s = static_cast<double>(step);
  if (s < warm) return peak * s / warm;
  const double span = static_cast<double>(total) - warm;
  if (span <= 0.0) return 0.0;
  const double progress = (s - warm) / span;
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

StepReport adamw_step(model::ParameterStore& params, const ad::Gradients& grads, AdamState& state,
                      double lr, const AdamWConfig& cfg) {
  StepReport report;
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::invalid_argument("adamw: unknown parameter '" + name + "'");
    if (params.frozen(name)) throw model::FrozenParameterError(name);
    if (g.shape() != params.value(name).shape()) {
      throw std::invalid_argument("adamw: gradient shape mismatch for '" + name + "'");
    }
    if (report.rejected_parameter.empty() && !all_finite(g)) report.rejected_parameter = name;
  }
  if (!report.rejected_parameter.empty()) return report;

  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    const model::Parameter& p = params.at(name);
    const bool decay =
        p.group == model::ParamGroup::kLora || p.group == model::ParamGroup::kAggregator;
    Tensor& m = state.m.try_emplace(name, g.shape()).first->second;
    Tensor& v = state.v.try_emplace(name, g.shape()).first->second;
    Tensor next = p.value;
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      double upd = mhat / (std::sqrt(vhat) + cfg.eps);
      if (decay) upd += cfg.weight_decay * next[k];
      next[k] -= lr * upd;
    }
    params.update(name, std::move(next));
  }
  report.applied = true;
  return report;
}

// -- pretraining --------------------------------------------------------------

namespace {

double eval_ce(const model::NdModel& m, const Corpus& corpus, std::size_t rows, std::size_t seq) {
  const Batch b = corpus.slice(true, 0, std::min(rows, corpus.eval().size()), seq);
  return total_loss(model::lm_forward(m, b.tokens).logits, b.targets, {}, TrainConfig{}).ce;
}

}  // namespace

PretrainReport pretrain_backbone(model::NdModel& backbone, const Corpus& corpus,
                                 const PretrainConfig& cfg) {
  if (backbone.P() != 1) throw std::invalid_argument("pretrain: expects a bare backbone");
  if (cfg.batch == 0 || cfg.seq == 0) throw std::invalid_argument("pretrain: empty batch");
  PretrainReport report;
  backbone.params.unfreeze(model::ParamGroup::kBackbone);
  report.initial_eval_ce = eval_ce(backbone, corpus, cfg.eval_rows, cfg.seq);
  if (cfg.steps > 0) {
    model::ForwardOptions o;
    o.batch = cfg.batch;
    o.seq = cfg.seq;
    model::ForwardGraph fg = model::build_forward(backbone, o);
    Rng data = make_rng(cfg.seed, "pretrain");
    AdamState state;
    AdamWConfig ac;
    ac.weight_decay = 0.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      const Batch b = corpus.sample(cfg.batch, cfg.seq, data);
      ad::Bindings bind = model::parameter_bindings(backbone);
      bind["tokens"] = b.tokens;
      bind["targets"] = b.targets;
      const ad::Evaluation ev = ad::evaluate(*fg.graph, bind);
      const double loss = ev.value(fg.ce).item();
      if (!std::isfinite(loss)) {
        backbone.params.freeze(model::ParamGroup::kBackbone);
        throw DivergenceError("pretraining loss became non-finite at step " + std::to_string(step),
                              step);
      }
      const ad::Gradients grads = ad::backward(*fg.graph, ev, fg.ce);
      const StepReport r = adamw_step(backbone.params, grads, state,
                                      lr_at(step, cfg.peak_lr, cfg.warmup_frac, cfg.steps), ac);
      if (!r.applied) {
        backbone.params.freeze(model::ParamGroup::kBackbone);
        throw DivergenceError("non-finite gradient for '" + r.rejected_parameter +
                                  "' at pretraining step " + std::to_string(step),
                              step);
      }
      ++report.steps;
    }
  }
  backbone.params.freeze(model::ParamGroup::kBackbone);
  report.final_eval_ce = eval_ce(backbone, corpus, cfg.eval_rows, cfg.seq);
  return report;
}

// -- evaluation and training --------------------------------------------------

namespace {

struct DiversityStats {
  std::optional<double> d_spec;
  std::vector<diversity::PairNorm> pair_norms;
};

DiversityStats diversity_stats(std::vector<Tensor> features, diversity::WhiteningMode mode) {
  DiversityStats s;
  if (features.size() < 2) return s;
  diversity::FeatureBatch raw;
  raw.streams = std::move(features);
  const diversity::FeatureBatch w = diversity::whiten(raw, mode);
  s.pair_norms = diversity::pair_norms(w);
  s.d_spec = diversity::d_spec(w);
  return s;
}

std::pair<double, double> alpha_range(const Tensor& alpha) {
  const auto [lo, hi] = std::minmax_element(alpha.data().begin(), alpha.data().end());
  return {*lo, *hi};
}

using Snapshot = std::vector<std::pair<std::string, Tensor>>;

Snapshot snapshot(const model::NdModel& m) {
  Snapshot s;
  for (const model::Parameter& p : m.params.all()) {
    if (!p.frozen) s.emplace_back(p.name, p.value);
  }
  return s;
}

void restore(model::NdModel& m, const Snapshot& s) {
  for (const auto& [name, value] : s) m.params.update(name, value);
}

}  // namespace

EvalMetrics evaluate_model(const model::NdModel& m, const Corpus& corpus, std::size_t rows,
                           std::size_t seq, diversity::WhiteningMode mode) {
  const Batch b = corpus.slice(true, 0, std::min(rows, corpus.eval().size()), seq);
  const model::LmOutput out = model::lm_forward(m, b.tokens);
  EvalMetrics metrics;
  metrics.ce = total_loss(out.logits, b.targets, {}, TrainConfig{}).ce;
  DiversityStats s = diversity_stats(out.design_features, mode);
  metrics.d_spec = s.d_spec;
  metrics.pair_norms = std::move(s.pair_norms);
  std::tie(metrics.alpha_min, metrics.alpha_max) = alpha_range(out.alpha);
  return metrics;
}

TrainResult train(model::NdModel& m, const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate(m.backbone);
  if (cfg.adapters.P != m.P()) throw std::invalid_argument("train: config and model disagree on P");
  for (const model::Parameter& p : m.params.all()) {
    if (p.group == model::ParamGroup::kBackbone && !p.frozen) {
      throw std::invalid_argument("train: backbone parameter '" + p.name + "' is not frozen");
    }
  }
  const std::size_t P = m.P();
  Rng data = make_rng(cfg.seed, "data");
  Rng drop = make_rng(cfg.seed, "dropout");
  Rng randk = make_rng(cfg.seed, "randk");

  struct Entry {
    model::ForwardGraph fg;
    LossVars loss;
  };
  // One graph per distinct pair set; full BT uses a single entry.
  std::map<std::vector<diversity::StreamPair>, Entry> graphs;
  auto graph_for = [&](const std::vector<diversity::StreamPair>& pairs) -> Entry& {
    auto it = graphs.find(pairs);
    if (it != graphs.end()) return it->second;
    model::ForwardOptions o;
    o.batch = cfg.batch;
    o.seq = cfg.seq;
    o.precision = cfg.precision;
    o.adapter_dropout = cfg.dropout > 0.0;
    Entry e{model::build_forward(m, o), {}};
    e.loss = total_loss(e.fg, cfg, pairs);
    return graphs.emplace(pairs, std::move(e)).first->second;
  };
  const std::vector<diversity::StreamPair> full =
      P >= 2 ? diversity::all_pairs(P) : std::vector<diversity::StreamPair>{};

  TrainResult result;
  result.initial = evaluate_model(m, corpus, cfg.eval_rows, cfg.seq, cfg.whitening);
  AdamState state;
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  Snapshot last_good = snapshot(m);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const double lr = lr_at(step, cfg);
    const Batch b = corpus.sample(cfg.batch, cfg.seq, data);
    std::vector<diversity::StreamPair> pairs = full;
    if (P >= 2 && cfg.bt_variant == BtVariant::kRandK) {
      pairs = diversity::sample_pairs(P, cfg.randk, randk);
    }
    Entry& e = graph_for(pairs);
    ad::Bindings bind = model::parameter_bindings(m);
    bind["tokens"] = b.tokens;
    bind["targets"] = b.targets;
    if (cfg.dropout > 0.0) model::bind_dropout_masks(e.fg, cfg.dropout, drop, bind);
    const ad::Evaluation ev = ad::evaluate(*e.fg.graph, bind);
    const double total = ev.value(e.loss.total).item();
    if (!std::isfinite(total)) {
      restore(m, last_good);
      result.status = TrainStatus::kDiverged;
      result.message = "loss became non-finite at step " + std::to_string(step) +
                       "; parameters restored to the last finite step";
      break;
    }
    last_good = snapshot(m);

    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      TraceRow row;
      row.step = step;
      row.lr = lr;
      row.ce = ev.value(e.loss.ce).item();
      row.bt = e.loss.bt ? ev.value(*e.loss.bt).item() : 0.0;
      row.total = total;
      if (P >= 2) {
        std::vector<Tensor> feats;
        for (ad::Var v : e.fg.design_features) feats.push_back(ev.value(v));
        row.d_spec = diversity_stats(std::move(feats), cfg.whitening).d_spec.value_or(0.0);
        std::tie(row.alpha_min, row.alpha_max) = alpha_range(ev.value(e.fg.alpha));
        result.diversity_trace.push_back({step, row.d_spec, row.bt, cfg.whitening});
      }
      result.trace.push_back(row);
    }

    const ad::Gradients grads = ad::backward(*e.fg.graph, ev, e.loss.total);
    const StepReport r = adamw_step(m.params, grads, state, lr, ac);
    if (!r.applied) {
      restore(m, last_good);
      result.status = TrainStatus::kDiverged;
      result.message = "non-finite gradient for '" + r.rejected_parameter + "' at step " +
                       std::to_string(step) + "; parameters restored";
      break;
    }
    result.steps_run = step + 1;
  }
  result.final = evaluate_model(m, corpus, cfg.eval_rows, cfg.seq, cfg.whitening);
  return result;
}

void write_train_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows,
                           bool diversity_columns) {
  std::vector<std::string> header{"step", "lr", "ce", "bt", "total"};
  if (diversity_columns) {
    header.insert(header.end(), {"d_spec", "alpha_min", "alpha_max"});
  }
  CsvWriter w(path, header);
  for (const TraceRow& r : rows) {
    w.cell(r.step).cell(r.lr).cell(r.ce).cell(r.bt).cell(r.total);
    if (diversity_columns) w.cell(r.d_spec).cell(r.alpha_min).cell(r.alpha_max);
    w.end_row();
  }
}

}  // namespace ndlab::training
