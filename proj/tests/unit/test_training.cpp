#include "ndlab/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "ndlab/csv.hpp"
#include "test_util.hpp"

namespace ndlab::training {
namespace {

using ndlab::testing::random_tensor;
using model::ParamGroup;

model::BackboneConfig tiny_backbone() {
  model::BackboneConfig b;
  b.layers = 2;
  b.d = 16;
  b.heads = 2;
  b.ff = 24;
  b.max_seq = 16;
  b.seed = 7;
  return b;
}

CorpusSpec tiny_corpus() {
  CorpusSpec c;
  c.n_templates = 4;
  c.n_train = 64;
  c.n_eval = 16;
  c.length = 9;
  c.seed = 2;
  return c;
}

TrainConfig tiny_train(std::size_t P) {
  TrainConfig c;
  c.adapters.P = P;
  c.adapters.rank = 2;
  c.adapters.n_prefix = 2;
  c.adapters.design_layer = 1;
  c.adapters.seed = 11;
  c.peak_lr = 1e-2;
  c.total_steps = 30;
  c.batch = 4;
  c.seq = 8;
  c.log_every = 10;
  c.eval_rows = 8;
  c.seed = 5;
  return c;
}

// -- corpus -------------------------------------------------------------------

TEST(Corpus, RegenerationIsBitIdentical) {
  const Corpus a(tiny_corpus()), b(tiny_corpus());
  EXPECT_EQ(a.train(), b.train());
  EXPECT_EQ(a.eval(), b.eval());
  CorpusSpec other = tiny_corpus();
  other.seed = 3;
  EXPECT_NE(Corpus(other).train(), a.train());
}

TEST(Corpus, RowsStartWithBosAndTargetsAreShifted) {
  const Corpus c(tiny_corpus());
  for (const auto& row : c.train()) {
    ASSERT_EQ(row.size(), 9u);
    EXPECT_EQ(row[0], model::kBos);
    for (std::size_t k = 1; k < row.size(); ++k) EXPECT_LT(row[k], model::kByteVocab);
  }
  const Batch b = c.slice(true, 14, 4, 8);
  EXPECT_EQ(b.indices, (std::vector<std::size_t>{14, 15, 0, 1}));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t t = 0; t + 1 < 8; ++t) EXPECT_EQ(b.targets.at(r, t), b.tokens.at(r, t + 1));
  }
  EXPECT_THROW(c.slice(true, 0, 1, 9), std::invalid_argument);
}

TEST(Corpus, NoiseFreeRowsStayInAlphabet) {
  CorpusSpec s = tiny_corpus();
  s.noise = 0.0;
  s.length = 60;
  const std::string abc = "abcdefghijklmnopqrstuvwxyz ,.";
  const Corpus clean(s);
  for (const auto& row : clean.train()) {
    for (std::size_t k = 1; k < row.size(); ++k) {
      EXPECT_NE(abc.find(static_cast<char>(row[k])), std::string::npos);
    }
  }
  // Full noise leaves the alphabet almost surely somewhere.
  s.noise = 1.0;
  std::size_t outside = 0;
  const Corpus noisy(s);
  for (const auto& row : noisy.train()) {
    for (std::size_t k = 1; k < row.size(); ++k) {
      outside += abc.find(static_cast<char>(row[k])) == std::string::npos;
    }
  }
  EXPECT_GT(outside, 0u);
}

TEST(Corpus, InvalidSpecsRejected) {
  CorpusSpec s = tiny_corpus();
  s.template_max = 2;
  s.template_min = 3;
  EXPECT_THROW(Corpus{s}, std::invalid_argument);
  s = tiny_corpus();
  s.noise = 1.5;
  EXPECT_THROW(Corpus{s}, std::invalid_argument);
}

// -- schedule -----------------------------------------------------------------

TEST(Schedule, Endpoints) {
  EXPECT_EQ(lr_at(0, 3e-4, 0.02, 2000), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(40, 3e-4, 0.02, 2000), 3e-4);
  EXPECT_NEAR(lr_at(2000, 3e-4, 0.02, 2000), 0.0, 1e-20);
  EXPECT_DOUBLE_EQ(lr_at(20, 3e-4, 0.02, 2000), 1.5e-4);
  EXPECT_THROW(lr_at(2001, 3e-4, 0.02, 2000), std::invalid_argument);
}

TEST(Schedule, ContinuousAndNonNegative) {
  const std::size_t total = 1000;
  double prev = lr_at(0, 1.0, 0.1, total);
  for (std::size_t s = 1; s <= total; ++s) {
    const double lr = lr_at(s, 1.0, 0.1, total);
    EXPECT_GE(lr, 0.0);
    EXPECT_LE(std::abs(lr - prev), 0.0101) << s;
    prev = lr;
  }
  // Left and right limits at the junction.
  EXPECT_NEAR(lr_at(99, 1.0, 0.1, total), 0.99, 1e-12);
  EXPECT_NEAR(lr_at(101, 1.0, 0.1, total), 0.5 * (1 + std::cos(M_PI / 900)), 1e-12);
}

TEST(Schedule, NoWarmup) {
  EXPECT_DOUBLE_EQ(lr_at(0, 2.0, 0.0, 10), 2.0);
}

// -- optimizer ------------------------------------------------------------------

model::ParameterStore scalar_store(double x, ParamGroup group = ParamGroup::kLora) {
  model::ParameterStore s;
  s.add("x", Tensor::from({1}, {x}), group);
  return s;
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  std::mt19937_64 rng(1);
  model::ParameterStore s;
  s.add("w", random_tensor({3, 4}, rng), ParamGroup::kLora);
  const Tensor before = s.value("w");
  AdamState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int k = 0; k < 5; ++k) {
    ASSERT_TRUE(adamw_step(s, {{"w", Tensor({3, 4})}}, st, 0.1, cfg).applied);
  }
  EXPECT_TRUE(bit_identical(before, s.value("w")));
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
  for (double g : {3.7, -0.002, 250.0}) {
    model::ParameterStore s = scalar_store(1.0);
    AdamState st;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(s, {{"x", Tensor::from({1}, {g})}}, st, 0.01, cfg);
    // eps shifts the step by lr·eps/|g|.
    EXPECT_NEAR(s.value("x")[0], 1.0 - 0.01 * (g > 0 ? 1 : -1), 1e-7) << g;
  }
}

TEST(AdamW, QuadraticBowlConverges) {
  model::ParameterStore s = scalar_store(1.0);
  AdamState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  // Reference simulation of the same recursion, written out directly.
  double x = 1.0, m = 0.0, v = 0.0;
  std::size_t reached = 0;
  for (std::size_t t = 1; t <= 500; ++t) {
    const double g = 2.0 * s.value("x")[0];
    adamw_step(s, {{"x", Tensor::from({1}, {g})}}, st, 0.05, cfg);
    const double gr = 2.0 * x;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    x -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(s.value("x")[0], x, 1e-12);
    if (!reached && std::abs(s.value("x")[0]) < 1e-3) reached = t;
  }
  EXPECT_GT(reached, 0u);
  EXPECT_LT(std::abs(s.value("x")[0]), 1e-3);
}

TEST(AdamW, DecayOnlyOnAdapterAndAggregatorGroups) {
  model::ParameterStore s;
  s.add("l", Tensor::from({1}, {2.0}), ParamGroup::kLora);
  s.add("a", Tensor::from({1}, {2.0}), ParamGroup::kAggregator);
  s.add("p", Tensor::from({1}, {2.0}), ParamGroup::kPrefix);
  AdamState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.5;
  adamw_step(s, {{"l", Tensor({1})}, {"a", Tensor({1})}, {"p", Tensor({1})}}, st, 0.1, cfg);
  EXPECT_DOUBLE_EQ(s.value("l")[0], 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_DOUBLE_EQ(s.value("a")[0], 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_DOUBLE_EQ(s.value("p")[0], 2.0);
}

TEST(AdamW, NonFiniteGradientRejected) {
  model::ParameterStore s;
  s.add("a", Tensor::from({1}, {1.0}), ParamGroup::kLora);
  s.add("b", Tensor::from({2}, {1.0, 2.0}), ParamGroup::kLora);
  AdamState st;
  const auto r = adamw_step(
      s, {{"a", Tensor::from({1}, {0.5})},
          {"b", Tensor::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()})}},
      st, 0.1, AdamWConfig{});
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(r.rejected_parameter, "b");
  EXPECT_EQ(st.t, 0u);
  EXPECT_TRUE(st.m.empty());
  EXPECT_EQ(s.value("a")[0], 1.0);
}

TEST(AdamW, FrozenParameterRejected) {
  model::ParameterStore s = scalar_store(1.0, ParamGroup::kBackbone);
  s.freeze(ParamGroup::kBackbone);
  AdamState st;
  EXPECT_THROW(adamw_step(s, {{"x", Tensor::from({1}, {1.0})}}, st, 0.1, AdamWConfig{}),
               model::FrozenParameterError);
  EXPECT_EQ(s.value("x")[0], 1.0);
}

// -- objective ------------------------------------------------------------------

struct Built {
  model::NdModel m;
  model::ForwardGraph fg;
  ad::Bindings bind;
};

Built build_for_loss(std::size_t P, std::uint64_t seed, std::size_t batch = 2, std::size_t seq = 6) {
  model::AdapterConfig a = tiny_train(P).adapters;
  a.seed = seed;
  Built out{model::build_model(tiny_backbone(), a), {}, {}};
  std::mt19937_64 rng(seed);
  for (const model::Parameter& p : out.m.params.all()) {
    if (p.group == ParamGroup::kLora && p.name.back() == 'B') {
      out.m.params.overwrite(p.name, random_tensor(p.value.shape(), rng, 0.5));
    }
  }
  model::ForwardOptions o;
  o.batch = batch;
  o.seq = seq;
  out.fg = model::build_forward(out.m, o);
  out.bind = model::parameter_bindings(out.m);
  Tensor tok({batch, seq}), tgt({batch, seq});
  std::uniform_int_distribution<int> id(0, 255);
  for (std::size_t k = 0; k < tok.size(); ++k) {
    tok[k] = id(rng);
    tgt[k] = id(rng);
  }
  out.bind["tokens"] = tok;
  out.bind["targets"] = tgt;
  return out;
}

TEST(Objective, ZeroLambdaIsExactlyCrossEntropy) {
  Built b = build_for_loss(3, 1);
  TrainConfig cfg = tiny_train(3);
  cfg.lambda_bt = 0.0;
  const auto pairs = diversity::all_pairs(3);
  const LossVars lv = total_loss(b.fg, cfg, pairs);
  EXPECT_EQ(lv.total.id(), lv.ce.id());
  ASSERT_TRUE(lv.bt.has_value());
  const ad::Evaluation ev = ad::evaluate(*b.fg.graph, b.bind);
  EXPECT_EQ(ev.value(lv.total).item(), ev.value(b.fg.ce).item());
  EXPECT_GT(ev.value(*lv.bt).item(), 0.0);
}

TEST(Objective, ComponentsRecombine) {
  Built b = build_for_loss(3, 2);
  TrainConfig cfg = tiny_train(3);
  cfg.lambda_bt = 0.01;
  const auto pairs = diversity::all_pairs(3);
  const LossVars lv = total_loss(b.fg, cfg, pairs);
  EXPECT_EQ(lv.pair_evaluations, 3u);
  const ad::Evaluation ev = ad::evaluate(*b.fg.graph, b.bind);
  const double ce = ev.value(lv.ce).item(), bt = ev.value(*lv.bt).item();
  EXPECT_NEAR(ev.value(lv.total).item(), ce + 0.01 * bt, 1e-9);

  // Value-level path on the same tensors.
  diversity::FeatureBatch feats;
  for (ad::Var v : b.fg.design_features) feats.streams.push_back(ev.value(v));
  const LossValues vals = total_loss(ev.value(b.fg.logits), b.bind.at("targets"), feats, cfg);
  EXPECT_NEAR(vals.ce, ce, 1e-12);
  EXPECT_NEAR(vals.bt, bt, 1e-9);
  EXPECT_NEAR(vals.total, ce + 0.01 * bt, 1e-9);
}

TEST(Objective, SingleStreamHasNoBtTerm) {
  Built b = build_for_loss(1, 3);
  const LossVars lv = total_loss(b.fg, tiny_train(1), {});
  EXPECT_FALSE(lv.bt.has_value());
  EXPECT_EQ(lv.total.id(), b.fg.ce.id());
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Built b = build_for_loss(2, 100 + seed, 2, 4);
    TrainConfig cfg = tiny_train(2);
    cfg.lambda_bt = 0.5;
    const auto pairs = diversity::all_pairs(2);
    const LossVars lv = total_loss(b.fg, cfg, pairs);
    for (const char* name : {"s0.prefix", "s1.l0.q.A", "s0.l1.down.B", "agg.w2", "agg.b1"}) {
      ASSERT_TRUE(b.m.params.contains(name)) << name;
      const auto r = ad::finite_difference_check(*b.fg.graph, b.bind, lv.total, name, 1e-4);
      EXPECT_TRUE(r.pass) << name << " seed " << seed << " rel " << r.max_rel_error;
    }
  }
}

// -- pretraining ---------------------------------------------------------------

TEST(Pretrain, ZeroStepsLeavesBackboneUnchangedAndFrozen) {
  model::NdModel bb = model::build_backbone(tiny_backbone());
  const auto h = bb.backbone_hash();
  PretrainConfig pc;
  pc.steps = 0;
  pc.seq = 8;
  const auto rep = pretrain_backbone(bb, Corpus(tiny_corpus()), pc);
  EXPECT_EQ(bb.backbone_hash(), h);
  EXPECT_EQ(rep.initial_eval_ce, rep.final_eval_ce);
  EXPECT_EQ(bb.params.trainable_count(), 0u);
}

TEST(Pretrain, HeldOutCrossEntropyDecreasesThenFrozen) {
  model::NdModel bb = model::build_backbone(tiny_backbone());
  PretrainConfig pc;
  pc.steps = 60;
  pc.batch = 8;
  pc.seq = 8;
  pc.seed = 1;
  const auto rep = pretrain_backbone(bb, Corpus(tiny_corpus()), pc);
  EXPECT_EQ(rep.steps, 60u);
  EXPECT_LT(rep.final_eval_ce, rep.initial_eval_ce);
  const std::string name = bb.params.all().front().name;
  EXPECT_TRUE(bb.params.frozen(name));
  AdamState st;
  EXPECT_THROW(adamw_step(bb.params, {{name, Tensor(bb.params.value(name).shape())}}, st, 0.1,
                          AdamWConfig{}),
               model::FrozenParameterError);
}

// -- training -------------------------------------------------------------------

TEST(Train, ReproducibleFrozenBackboneAndCeDecreases) {
  const Corpus corpus(tiny_corpus());
  const TrainConfig cfg = tiny_train(2);
  model::NdModel m1 = model::build_model(tiny_backbone(), cfg.adapters);
  model::NdModel m2 = model::build_model(tiny_backbone(), cfg.adapters);
  const auto h = m1.backbone_hash();
  const TrainResult r1 = train(m1, corpus, cfg);
  const TrainResult r2 = train(m2, corpus, cfg);
  EXPECT_EQ(r1.status, TrainStatus::kCompleted);
  EXPECT_EQ(r1.steps_run, 30u);
  EXPECT_EQ(m1.backbone_hash(), h);
  ASSERT_EQ(r1.trace.size(), 4u);  // steps 0, 10, 20, 29
  EXPECT_EQ(r1.trace.back().step, 29u);
  ASSERT_EQ(r1.trace.size(), r2.trace.size());
  for (std::size_t k = 0; k < r1.trace.size(); ++k) {
    EXPECT_EQ(r1.trace[k].total, r2.trace[k].total);
    EXPECT_EQ(r1.trace[k].d_spec, r2.trace[k].d_spec);
    EXPECT_EQ(r1.trace[k].alpha_min, r2.trace[k].alpha_min);
  }
  for (const model::Parameter& p : m1.params.all()) {
    EXPECT_TRUE(bit_identical(p.value, m2.params.value(p.name))) << p.name;
  }
  EXPECT_LT(r1.final.ce, r1.initial.ce);
  ASSERT_TRUE(r1.final.d_spec.has_value());
  EXPECT_EQ(r1.diversity_trace.size(), r1.trace.size());
  for (const TraceRow& row : r1.trace) {
    EXPECT_NEAR(row.total, row.ce + cfg.lambda_bt * row.bt, 1e-9);
    EXPECT_GE(row.alpha_min, cfg.adapters.epsilon / 2 - 1e-12);
  }
}

TEST(Train, RandKAndDropoutRun) {
  const Corpus corpus(tiny_corpus());
  TrainConfig cfg = tiny_train(3);
  cfg.total_steps = 6;
  cfg.bt_variant = BtVariant::kRandK;
  cfg.randk.K = 1;
  cfg.dropout = 0.1;
  model::NdModel m = model::build_model(tiny_backbone(), cfg.adapters);
  const TrainResult r = train(m, corpus, cfg);
  EXPECT_EQ(r.status, TrainStatus::kCompleted);
  EXPECT_EQ(r.steps_run, 6u);
}

TEST(Train, SingleStreamOmitsDiversity) {
  const Corpus corpus(tiny_corpus());
  TrainConfig cfg = apply_arm(tiny_train(4), Arm::kStandard);
  cfg.total_steps = 4;
  model::NdModel m = model::build_model(tiny_backbone(), cfg.adapters);
  const TrainResult r = train(m, corpus, cfg);
  EXPECT_EQ(r.status, TrainStatus::kCompleted);
  EXPECT_TRUE(r.diversity_trace.empty());
  EXPECT_FALSE(r.final.d_spec.has_value());
  const auto path = std::filesystem::temp_directory_path() / "ndlab_trace_p1.csv";
  write_train_trace_csv(path, r.trace, false);
  const CsvTable t = read_csv(path);
  EXPECT_EQ(t.header, (std::vector<std::string>{"step", "lr", "ce", "bt", "total"}));
  std::filesystem::remove(path);
}

TEST(Train, DivergenceRestoresLastGoodParameters) {
  const Corpus corpus(tiny_corpus());
  TrainConfig cfg = tiny_train(2);
  cfg.total_steps = 5;
  model::NdModel m = model::build_model(tiny_backbone(), cfg.adapters);
  // A NaN aggregator weight poisons the very first loss.
  Tensor w = m.params.value("agg.w2");
  w[0] = std::numeric_limits<double>::quiet_NaN();
  m.params.update("agg.w2", w);
  const TrainResult r = train(m, corpus, cfg);
  EXPECT_EQ(r.status, TrainStatus::kDiverged);
  EXPECT_EQ(r.steps_run, 0u);
  EXPECT_FALSE(r.message.empty());
  EXPECT_TRUE(std::isnan(m.params.value("agg.w2")[0]));
}

TEST(Train, UnfrozenBackboneRejected) {
  TrainConfig cfg = tiny_train(2);
  model::NdModel m = model::build_model(tiny_backbone(), cfg.adapters);
  m.params.unfreeze(ParamGroup::kBackbone);
  EXPECT_THROW(train(m, Corpus(tiny_corpus()), cfg), std::invalid_argument);
}

TEST(TrainConfigText, RoundTrip) {
  TrainConfig cfg = tiny_train(3);
  cfg.bt_variant = BtVariant::kRandK;
  cfg.randk.K = 2;
  cfg.randk.weights = {0.5, 0.25, 0.25};
  cfg.precision = Precision::kSingle;
  cfg.whitening = diversity::WhiteningMode::kPerDimension;
  cfg.seed = 1234567890123ULL;
  KvConfig kv;
  write_train_config(cfg, kv);
  const TrainConfig back = read_train_config(KvConfig::parse(kv.to_text()));
  KvConfig kv2;
  write_train_config(back, kv2);
  EXPECT_EQ(kv.to_text(), kv2.to_text());
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_EQ(back.randk.weights, cfg.randk.weights);
}

TEST(Arms, Presets) {
  const TrainConfig base = tiny_train(4);
  EXPECT_EQ(apply_arm(base, Arm::kStandard).adapters.P, 1u);
  EXPECT_TRUE(apply_arm(base, Arm::kParScale).adapters.shared_lora);
  EXPECT_EQ(apply_arm(base, Arm::kParScale).lambda_bt, 0.0);
  EXPECT_EQ(apply_arm(base, Arm::kStreamLora).lambda_bt, 0.0);
  EXPECT_GT(apply_arm(base, Arm::kNdLora).lambda_bt, 0.0);
  EXPECT_EQ(apply_arm(base, Arm::kDropout).dropout, 0.1);
  EXPECT_EQ(parse_arm("nd-lora"), Arm::kNdLora);
  EXPECT_THROW(parse_arm("bogus"), std::invalid_argument);
}

}  // namespace
}  // namespace ndlab::training
