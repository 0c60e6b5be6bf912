#include "ndlab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <numeric>
#include <ostream>
#include <set>

#include "ndlab/costmodel.hpp"
#include "ndlab/csv.hpp"
#include "ndlab/diversity.hpp"
#include "ndlab/intervention.hpp"
#include "ndlab/model.hpp"
#include "ndlab/rng.hpp"
#include "ndlab/theory.hpp"
#include "ndlab/training.hpp"

#ifndef NDLAB_VERSION
#define NDLAB_VERSION "0.0.0"
#endif

namespace ndlab::cli {

namespace fs = std::filesystem;

const char* version() { return "ndlab " NDLAB_VERSION; }

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s{"theory", "train", "diversity", "corrupt", "cost"};
  return s;
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Sections each subcommand reads; keys elsewhere in a shared file are ignored.
std::vector<std::string> sections_of(const std::string& sub) {
  if (sub == "theory") return {"theory"};
  if (sub == "train") return {"backbone", "adapters", "corpus", "pretrain", "train"};
  if (sub == "diversity") return {"backbone", "adapters", "corpus", "diversity"};
  if (sub == "corrupt") return {"corpus", "corrupt"};
  if (sub == "cost") return {"cost"};
  throw UsageError("unknown subcommand '" + sub + "'");
}

// Keys that are valid without having a default value.
const std::set<std::string>& optional_keys() {
  static const std::set<std::string> k{"cost.custom_P", "cost.custom_bt_units"};
  return k;
}

void add_corpus_defaults(KvConfig& c, std::uint64_t seed, std::size_t length) {
  const training::CorpusSpec s;
  c.set("corpus.n_templates", s.n_templates);
  c.set("corpus.template_min", s.template_min);
  c.set("corpus.template_max", s.template_max);
  c.set("corpus.n_train", s.n_train);
  c.set("corpus.n_eval", s.n_eval);
  c.set("corpus.length", length);
  c.set("corpus.noise", s.noise);
  c.set("corpus.seed", std::to_string(derive_seed(seed, "data")));
}

training::CorpusSpec read_corpus(const KvConfig& c) {
  training::CorpusSpec s;
  s.n_templates = c.get_size("corpus.n_templates", s.n_templates);
  s.template_min = c.get_size("corpus.template_min", s.template_min);
  s.template_max = c.get_size("corpus.template_max", s.template_max);
  s.n_train = c.get_size("corpus.n_train", s.n_train);
  s.n_eval = c.get_size("corpus.n_eval", s.n_eval);
  s.length = c.get_size("corpus.length", s.length);
  s.noise = c.get_double("corpus.noise", s.noise);
  s.seed = c.get_u64("corpus.seed", s.seed);
  return s;
}

void add_model_defaults(KvConfig& c, std::uint64_t seed) {
  model::BackboneConfig b;
  b.seed = derive_seed(seed, "init");
  model::AdapterConfig a;
  a.seed = derive_seed(seed, "adapters");
  model::write_config(b, a, c);
}

training::PretrainConfig read_pretrain(const KvConfig& c) {
  training::PretrainConfig p;
  p.steps = c.get_size("pretrain.steps", p.steps);
  p.peak_lr = c.get_double("pretrain.peak_lr", p.peak_lr);
  p.warmup_frac = c.get_double("pretrain.warmup_frac", p.warmup_frac);
  p.batch = c.get_size("pretrain.batch", p.batch);
  p.seq = c.get_size("pretrain.seq", p.seq);
  p.eval_rows = c.get_size("pretrain.eval_rows", p.eval_rows);
  p.seed = c.get_u64("pretrain.seed", p.seed);
  return p;
}

void check_seq(const training::CorpusSpec& corpus, std::size_t seq, const std::string& key) {
  if (seq + 1 > corpus.length) {
    throw UsageError(key + " = " + std::to_string(seq) + " needs corpus.length >= " +
                     std::to_string(seq + 1));
  }
}

model::NdModel load_or_build(const KvConfig& c, const std::string& key, bool required) {
  const std::string path = c.get_string(key, "");
  if (path.empty()) {
    if (required) throw UsageError(key + " is required");
    return model::build_model(model::read_backbone_config(c), model::read_adapter_config(c));
  }
  if (!fs::exists(path)) throw UsageError("checkpoint '" + path + "' does not exist");
  return model::load_checkpoint(path);
}

// -- subcommands ----------------------------------------------------------------

struct Context {
  const RunRequest& req;
  const KvConfig& cfg;
  RunManifest& manifest;
  std::ostream& log;

  fs::path artifact(const std::string& name) {
    const fs::path p = req.out_dir / name;
    manifest.artifacts.emplace_back(name, p);
    return p;
  }
  void result(const std::string& key, const std::string& value) {
    manifest.config.set("manifest.result." + key, value);
    log << key << " = " << value << "\n";
  }
};

int cmd_theory(Context& ctx) {
  const KvConfig& c = ctx.cfg;
  const double sigma2 = c.get_double("theory.sigma2", 1.0);
  const double mu = c.get_double("theory.mu", 1.0);
  theory::RhoSchedule sched;
  sched.rho0 = c.get_double("theory.rho0", sched.rho0);
  sched.beta = c.get_double("theory.beta", sched.beta);
  sched.gamma = c.get_double("theory.gamma", sched.gamma);
  const std::size_t p_min = c.get_size("theory.p_min", 1);
  const std::size_t p_max = c.get_size("theory.p_max", 64);
  if (p_min == 0 || p_max < p_min) throw UsageError("theory.p_min/p_max must satisfy 1 <= p_min <= p_max");
  std::vector<std::size_t> range(p_max - p_min + 1);
  std::iota(range.begin(), range.end(), p_min);
  theory::BoundCurve curve;
  try {
    curve = theory::bound_curve(sigma2, mu, sched, range);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  theory::write_bound_curve_csv(ctx.artifact("bound_curve.csv"), curve);
  const theory::PStar ps = theory::find_p_star(curve);
  ctx.result("p_star", std::to_string(ps.P));
  ctx.result("p_star_bound", format_double(ps.bound));
  if (ps.boundary) ctx.log << "warning: boundary minimizer at P=" << ps.P << "\n";
  if (ps.tie) ctx.log << "warning: tied minimizers; reporting the smallest P\n";

  if (!c.get_bool("theory.certify", true)) return kExitOk;
  theory::CertGrid grid;
  grid.sigma2 = c.get_doubles("theory.grid_sigma2", grid.sigma2);
  grid.mu = c.get_doubles("theory.grid_mu", grid.mu);
  grid.rho = c.get_doubles("theory.grid_rho", grid.rho);
  grid.P = c.get_sizes("theory.grid_P", grid.P);
  theory::McConfig mc;
  mc.n_samples = c.get_size("theory.mc_samples", mc.n_samples);
  mc.shards = c.get_size("theory.mc_shards", mc.shards);
  mc.seed = c.get_u64("theory.seed", mc.seed);
  mc.threads = ctx.req.threads;
  std::vector<theory::CertRow> rows;
  try {
    rows = theory::certify_grid(grid, mc);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  theory::write_mc_cert_csv(ctx.artifact("mc_cert.csv"), rows);
  const auto failed = std::count_if(rows.begin(), rows.end(), [](const theory::CertRow& r) {
    return !r.bound_pass || !r.variance_pass;
  });
  ctx.result("cert_rows", std::to_string(rows.size()));
  ctx.result("cert_failures", std::to_string(failed));
  return failed == 0 ? kExitOk : kExitCertification;
}

int cmd_train(Context& ctx) {
  const KvConfig& c = ctx.cfg;
  const training::CorpusSpec cs = read_corpus(c);
  training::TrainConfig tc = training::read_train_config(c);
  const training::Arm arm = training::parse_arm(c.get_string("train.arm", "nd-lora"));
  tc = training::apply_arm(tc, arm);
  const model::BackboneConfig bc = model::read_backbone_config(c);
  training::PretrainConfig pc = read_pretrain(c);
  check_seq(cs, tc.seq, "train.seq");
  check_seq(cs, pc.seq, "pretrain.seq");
  try {
    bc.validate();
    tc.validate(bc);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const training::Corpus corpus(cs);
  model::NdModel backbone = model::build_backbone(bc);
  training::PretrainReport pre;
  try {
    pre = training::pretrain_backbone(backbone, corpus, pc);
  } catch (const training::DivergenceError& e) {
    ctx.log << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  ctx.result("pretrain_initial_ce", format_double(pre.initial_eval_ce));
  ctx.result("pretrain_final_ce", format_double(pre.final_eval_ce));

  model::NdModel m = model::attach_adapters(backbone, tc.adapters);
  const training::TrainResult r = training::train(m, corpus, tc);
  model::save_checkpoint(m, ctx.artifact("model.ckpt"));
  const bool div = m.P() >= 2;
  training::write_train_trace_csv(ctx.artifact("train_trace.csv"), r.trace, div);
  if (div) diversity::write_diversity_trace_csv(ctx.artifact("diversity_trace.csv"), r.diversity_trace);
  ctx.result("arm", training::to_string(arm));
  ctx.result("steps_run", std::to_string(r.steps_run));
  ctx.result("initial_eval_ce", format_double(r.initial.ce));
  ctx.result("final_eval_ce", format_double(r.final.ce));
  if (r.final.d_spec) {
    ctx.result("initial_d_spec", format_double(*r.initial.d_spec));
    ctx.result("final_d_spec", format_double(*r.final.d_spec));
  }
  if (r.status == training::TrainStatus::kDiverged) {
    ctx.log << "error: " << r.message << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_diversity(Context& ctx) {
  const KvConfig& c = ctx.cfg;
  const model::NdModel m = load_or_build(c, "diversity.checkpoint", false);
  if (m.P() < 2) throw UsageError("diversity needs a model with P >= 2 (got P=1)");
  const training::CorpusSpec cs = read_corpus(c);
  const std::size_t seq = c.get_size("diversity.seq", 32);
  const std::size_t rows = c.get_size("diversity.rows", 32);
  check_seq(cs, seq, "diversity.seq");
  if (seq > m.backbone.max_seq) throw UsageError("diversity.seq exceeds the model context");
  const auto mode = diversity::parse_whitening_mode(c.get_string("diversity.whitening", "full"));
  const training::Corpus corpus(cs);
  const training::Batch b = corpus.slice(true, 0, std::min(rows, corpus.eval().size()), seq);
  const model::LmOutput out = model::lm_forward(m, b.tokens);
  diversity::FeatureBatch raw;
  raw.streams = out.design_features;
  const diversity::FeatureBatch w = diversity::whiten(raw, mode);
  const auto norms = diversity::pair_norms(w);
  const double ds = diversity::d_spec(w);
  {
    CsvWriter pairs(ctx.artifact("diversity_pairs.csv"), {"i", "j", "spectral_norm", "converged"});
    for (const auto& p : norms) pairs.cell(p.i).cell(p.j).cell(p.norm).cell(p.converged).end_row();
  }
  const auto& a = out.alpha.storage();
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  CsvWriter summary(ctx.artifact("diversity_report.csv"),
                    {"d_spec", "mode", "pairs", "rows", "alpha_min", "alpha_max", "alpha_mean"});
  summary.cell(ds).cell(std::string(diversity::to_string(mode))).cell(norms.size())
      .cell(w.rows()).cell(*lo).cell(*hi).cell(mean).end_row();
  ctx.result("d_spec", format_double(ds));
  ctx.result("whitening", diversity::to_string(mode));
  return kExitOk;
}

int cmd_corrupt(Context& ctx) {
  const KvConfig& c = ctx.cfg;
  const model::NdModel m = load_or_build(c, "corrupt.checkpoint", true);
  if (m.P() < 2) throw UsageError("corrupt needs a checkpoint with P >= 2 (got P=1)");
  const training::CorpusSpec cs = read_corpus(c);
  intervention::PairedEvalConfig pc = intervention::read_corrupt_config(c);
  check_seq(cs, pc.seq, "corrupt.seq");
  if (pc.seq > m.backbone.max_seq) throw UsageError("corrupt.seq exceeds the model context");
  try {
    pc.validate();
    pc.corruption.validate(m.P());
    pc.corruption.resolved_hook(m);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const training::Corpus corpus(cs);
  const intervention::PairedResult r = intervention::paired_eval(m, corpus.eval(), pc);
  intervention::write_intervention_csv(ctx.artifact("intervention.csv"), r);
  intervention::write_combined_csv(ctx.artifact("intervention_combined.csv"), r);
  ctx.result("mean_delta", format_double(r.mean_delta));
  ctx.result("mean_delta_dspec", format_double(r.mean_delta_dspec));
  if (r.combined) {
    ctx.result("fisher_chi2", format_double(r.combined->chi2));
    ctx.result("fisher_dof", std::to_string(r.combined->dof));
    ctx.result("fisher_p", format_double(r.combined->p));
  } else {
    ctx.log << "note: " << r.note << "\n";
  }
  return kExitOk;
}

int cmd_cost(Context& ctx) {
  costmodel::CostRequest r;
  try {
    r = costmodel::read_cost_config(ctx.cfg);
    const auto rows = costmodel::build_rows(r);
    std::optional<double> pre;
    if (r.amortize) pre = r.pretrain_tokens;
    costmodel::write_cost_table_csv(ctx.artifact("cost_table.csv"), rows, pre, r.finetune_tokens);
    for (const auto& row : rows) {
      ctx.log << row.name << ": total " << format_double(row.total) << ", relative "
              << format_double(row.relative) << "\n";
    }
    if (r.amortize) {
      const auto nd = costmodel::reference_variants().back();
      ctx.result("lifecycle_nd_lora",
                 format_double(costmodel::amortized_cost(r.pretrain_tokens, r.finetune_tokens,
                                                         nd.relative)));
    }
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return kExitOk;
}

}  // namespace

// -- manifest ---------------------------------------------------------------------

KvConfig RunManifest::to_config() const {
  KvConfig c = config;
  c.set("manifest.subcommand", subcommand);
  c.set("manifest.seed", std::to_string(seed));
  c.set("manifest.started", started);
  c.set("manifest.finished", finished);
  c.set("manifest.version", version);
  c.set("manifest.exit_code", exit_code);
  std::string names;
  for (const auto& [name, path] : artifacts) {
    names += (names.empty() ? "" : ",") + name;
    c.set("manifest.artifact." + name, path.string());
  }
  c.set("manifest.artifacts", names);
  return c;
}

RunManifest RunManifest::from_config(const KvConfig& c) {
  RunManifest m;
  m.subcommand = c.get_string("manifest.subcommand", "");
  if (m.subcommand.empty()) throw UsageError("not a manifest: manifest.subcommand missing");
  m.seed = c.get_u64("manifest.seed", 0);
  m.started = c.get_string("manifest.started", "");
  m.finished = c.get_string("manifest.finished", "");
  m.version = c.get_string("manifest.version", "");
  m.exit_code = static_cast<int>(c.get_int("manifest.exit_code", 0));
  for (const auto& [k, v] : c.entries()) {
    if (k.rfind("manifest.", 0) != 0) m.config.set(k, v);
  }
  std::string names = c.get_string("manifest.artifacts", "");
  std::size_t pos = 0;
  while (!names.empty() && pos <= names.size()) {
    const std::size_t comma = std::min(names.find(',', pos), names.size());
    const std::string n = names.substr(pos, comma - pos);
    m.artifacts.emplace_back(n, c.get_string("manifest.artifact." + n, ""));
    pos = comma + 1;
  }
  return m;
}

void RunManifest::save(const fs::path& path) const { to_config().save(path); }

RunManifest RunManifest::load(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("manifest '" + path.string() + "' does not exist");
  return from_config(KvConfig::load(path));
}

// -- configuration ------------------------------------------------------------------

KvConfig default_config(const std::string& sub, std::uint64_t seed) {
  KvConfig c;
  if (sub == "theory") {
    c.set("theory.sigma2", 1.0);
    c.set("theory.mu", 1.0);
    c.set("theory.rho0", 0.0);
    c.set("theory.beta", 0.01);
    c.set("theory.gamma", 1.0);
    c.set("theory.p_min", std::size_t{1});
    c.set("theory.p_max", std::size_t{64});
    c.set("theory.certify", true);
    const theory::CertGrid g;
    c.set("theory.grid_sigma2", join(g.sigma2));
    c.set("theory.grid_mu", join(g.mu));
    c.set("theory.grid_rho", join(g.rho));
    c.set("theory.grid_P", join(g.P));
    const theory::McConfig mc;
    c.set("theory.mc_samples", mc.n_samples);
    c.set("theory.mc_shards", mc.shards);
    c.set("theory.seed", std::to_string(derive_seed(seed, "mc")));
  } else if (sub == "train") {
    add_model_defaults(c, seed);
    training::TrainConfig tc;
    tc.seed = derive_seed(seed, "train");
    tc.adapters.seed = derive_seed(seed, "adapters");
    training::write_train_config(tc, c);
    c.set("train.arm", "nd-lora");
    add_corpus_defaults(c, seed, tc.seq + 1);
    training::PretrainConfig pc;
    c.set("pretrain.steps", pc.steps);
    c.set("pretrain.peak_lr", pc.peak_lr);
    c.set("pretrain.warmup_frac", pc.warmup_frac);
    c.set("pretrain.batch", pc.batch);
    c.set("pretrain.seq", pc.seq);
    c.set("pretrain.eval_rows", pc.eval_rows);
    c.set("pretrain.seed", std::to_string(derive_seed(seed, "pretrain")));
  } else if (sub == "diversity") {
    add_model_defaults(c, seed);
    add_corpus_defaults(c, seed, 129);
    c.set("diversity.checkpoint", "");
    c.set("diversity.rows", std::size_t{32});
    c.set("diversity.seq", std::size_t{32});
    c.set("diversity.whitening", "full");
  } else if (sub == "corrupt") {
    add_corpus_defaults(c, seed, 129);
    intervention::PairedEvalConfig pc;
    pc.corruption.seed = derive_seed(seed, "corruption");
    intervention::write_corrupt_config(pc, c);
    c.set("corrupt.checkpoint", "");
  } else if (sub == "cost") {
    costmodel::write_cost_config(costmodel::CostRequest{}, c);
  } else {
    throw UsageError("unknown subcommand '" + sub + "'");
  }
  return c;
}

KvConfig resolve_config(const RunRequest& req) {
  const std::vector<std::string> sections = sections_of(req.subcommand);
  KvConfig out = default_config(req.subcommand, req.seed);
  const KvConfig defaults = out;
  for (const auto& [k, v] : req.config.entries()) {
    const std::string section = k.substr(0, k.find('.'));
    if (std::find(sections.begin(), sections.end(), section) == sections.end()) continue;
    if (!defaults.contains(k) && !optional_keys().count(k)) {
      throw UsageError("unknown config key '" + k + "' for subcommand " + req.subcommand);
    }
    out.set(k, v);
  }
  // Corpus rows follow the longest requested window unless set explicitly.
  if (req.subcommand == "train" && !req.config.contains("corpus.length")) {
    const std::size_t seq = std::max(out.get_size("train.seq", 128), out.get_size("pretrain.seq", 64));
    out.set("corpus.length", seq + 1);
  }
  return out;
}

RunOutcome run(const RunRequest& req, std::ostream& log) {
  RunOutcome outcome;
  RunManifest& m = outcome.manifest;
  m.subcommand = req.subcommand;
  m.seed = req.seed;
  m.version = version();
  m.started = utc_now();
  try {
    m.config = resolve_config(req);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  std::error_code ec;
  fs::create_directories(req.out_dir, ec);
  if (ec) throw UsageError("cannot create output directory '" + req.out_dir.string() + "'");
  const KvConfig cfg = m.config;
  Context ctx{req, cfg, m, log};
  int code = kExitOk;
  try {
    if (req.subcommand == "theory") code = cmd_theory(ctx);
    else if (req.subcommand == "train") code = cmd_train(ctx);
    else if (req.subcommand == "diversity") code = cmd_diversity(ctx);
    else if (req.subcommand == "corrupt") code = cmd_corrupt(ctx);
    else code = cmd_cost(ctx);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  } catch (const model::CheckpointError& e) {
    throw UsageError(e.what());
  } catch (const diversity::RankDeficientError& e) {
    log << "error: " << e.what() << "\n";
    code = kExitNumerical;
  }
  m.exit_code = code;
  m.finished = utc_now();
  m.save(req.out_dir / "manifest.txt");
  outcome.exit_code = code;
  return outcome;
}

RunRequest replay_request(const RunManifest& manifest, const fs::path& out_dir) {
  RunRequest r;
  r.subcommand = manifest.subcommand;
  r.config = manifest.config;
  r.seed = manifest.seed;
  r.out_dir = out_dir;
  return r;
}

}  // namespace ndlab::cli
