#include "ndlab/intervention.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "ndlab/csv.hpp"
#include "ndlab/training.hpp"
#include "test_util.hpp"

namespace ndlab::intervention {
namespace {

using ndlab::testing::random_tensor;

std::vector<Tensor> random_states(std::size_t P, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> s;
  for (std::size_t i = 0; i < P; ++i) s.push_back(random_tensor({2, 10, 4}, rng));
  return s;
}

TEST(CorruptStreams, ZeroFractionIsIdentity) {
  const auto s = random_states(3, 1);
  CorruptionConfig c;
  c.fraction = 0.0;
  const auto out = corrupt_streams(s, c);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(bit_identical(out[i], s[i]));
}

TEST(CorruptStreams, FullFractionFixedDonorCopiesStream) {
  const auto s = random_states(3, 2);
  CorruptionConfig c;
  c.fraction = 1.0;
  c.target_streams = {2};
  c.donor = 1;
  const auto out = corrupt_streams(s, c);
  EXPECT_TRUE(bit_identical(out[2], out[1]));
  EXPECT_TRUE(bit_identical(out[1], s[1]));
  EXPECT_TRUE(bit_identical(out[0], s[0]));
}

TEST(CorruptStreams, CopiesWholeRowsFromOtherStreams) {
  const auto s = random_states(4, 3);
  CorruptionConfig c;
  c.fraction = 0.25;
  c.seed = 8;
  const auto out = corrupt_streams(s, c);
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t changed = 0;
    for (std::size_t n = 0; n < 20; ++n) {
      bool same = true;
      for (std::size_t k = 0; k < 4; ++k) same &= out[i][n * 4 + k] == s[i][n * 4 + k];
      if (same) continue;
      ++changed;
      // The replacement is a verbatim row of some other stream (no rescaling).
      bool found = false;
      for (std::size_t j = 0; j < 4; ++j) {
        if (j == i) continue;
        bool eq = true;
        for (std::size_t k = 0; k < 4; ++k) eq &= out[i][n * 4 + k] == s[j][n * 4 + k];
        found |= eq;
      }
      EXPECT_TRUE(found);
    }
    EXPECT_EQ(changed, 5u);
  }
  EXPECT_EQ(corrupt_streams(s, c)[2].storage(), out[2].storage());
}

TEST(CorruptStreams, Rejections) {
  CorruptionConfig c;
  EXPECT_THROW(corrupt_streams(random_states(1, 1), c), std::invalid_argument);
  c.fraction = 1.5;
  EXPECT_THROW(corrupt_streams(random_states(2, 1), c), std::invalid_argument);
  c.fraction = 0.5;
  c.target_streams = {1};
  c.donor = 1;
  EXPECT_THROW(corrupt_streams(random_states(2, 1), c), std::invalid_argument);
}

TEST(CorruptStreams, IncreasesDspecOnDiverseStreams) {
  std::mt19937_64 rng(4);
  std::vector<Tensor> s;
  for (int i = 0; i < 3; ++i) s.push_back(random_tensor({2000, 6}, rng));
  CorruptionConfig c;
  c.fraction = 0.25;
  diversity::FeatureBatch base{s};
  diversity::FeatureBatch corr{corrupt_streams(s, c)};
  const auto mode = diversity::WhiteningMode::kFull;
  EXPECT_GT(diversity::d_spec(diversity::whiten(corr, mode)),
            diversity::d_spec(diversity::whiten(base, mode)) + 0.05);
}

// -- paired evaluation ----------------------------------------------------------

struct Fixture {
  model::NdModel m;
  training::Corpus corpus;
};

Fixture small_fixture(std::size_t P, double lora_scale = 0.5) {
  model::BackboneConfig b;
  b.layers = 2;
  b.d = 8;
  b.heads = 2;
  b.ff = 16;
  b.max_seq = 12;
  b.seed = 1;
  model::AdapterConfig a;
  a.P = P;
  a.rank = 2;
  a.n_prefix = 2;
  a.design_layer = 1;
  a.seed = 2;
  training::CorpusSpec cs;
  cs.n_train = 8;
  cs.n_eval = 20;
  cs.length = 9;
  cs.seed = 3;
  Fixture f{model::build_model(b, a), training::Corpus(cs)};
  std::mt19937_64 rng(9);
  for (const model::Parameter& p : f.m.params.all()) {
    if (p.group == model::ParamGroup::kLora && p.name.back() == 'B') {
      f.m.params.overwrite(p.name, random_tensor(p.value.shape(), rng, lora_scale));
    }
  }
  return f;
}

PairedEvalConfig small_eval() {
  PairedEvalConfig c;
  c.samples = 24;
  c.seq = 8;
  c.eval_batch = 8;
  c.probe_tokens = 3;
  c.corruption.seed = 4;
  return c;
}

TEST(PairedEval, ZeroFractionIsNullRun) {
  Fixture f = small_fixture(2);
  PairedEvalConfig c = small_eval();
  c.corruption.fraction = 0.0;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  ASSERT_EQ(r.subs.size(), 4u);
  for (const SubExperiment& s : r.subs) {
    EXPECT_EQ(s.n(), 24u);
    for (double d : s.delta) EXPECT_EQ(d, 0.0);
    EXPECT_EQ(s.test.flag, TestFlag::kNoEffect);
    EXPECT_EQ(s.test.p, 1.0);
    EXPECT_EQ(s.delta_dspec, 0.0);
  }
  ASSERT_TRUE(r.combined.has_value());
  EXPECT_EQ(r.combined->dof, 8u);
  EXPECT_NEAR(r.combined->p, 1.0, 1e-12);
}

TEST(PairedEval, PlantedShiftRecovered) {
  Fixture f = small_fixture(2);
  PairedEvalConfig c = small_eval();
  c.corruption.fraction = 0.0;
  c.planted_shift = -0.05;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  EXPECT_NEAR(r.mean_delta, -0.05, 1e-12);
  EXPECT_FALSE(r.combined.has_value());
  EXPECT_FALSE(r.note.empty());
}

TEST(PairedEval, FullSubstitutionCollapsesStreams) {
  Fixture f = small_fixture(2, 4.0);
  PairedEvalConfig c = small_eval();
  c.corruption.fraction = 1.0;
  c.corruption.target_streams = {1};
  c.corruption.donor = 0;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  for (const SubExperiment& s : r.subs) {
    EXPECT_LT(s.dspec_baseline, 0.999);
    EXPECT_NEAR(s.dspec_corrupted, 1.0, 1e-3);
    EXPECT_GT(s.delta_dspec, 0.0);
    EXPECT_DOUBLE_EQ(s.delta_dspec, s.dspec_corrupted - s.dspec_baseline);
  }
}

TEST(PairedEval, DeterministicWithFisherDof) {
  Fixture f = small_fixture(3, 4.0);
  PairedEvalConfig c = small_eval();
  c.corruption.fraction = 0.25;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  for (const SubExperiment& s : r.subs) EXPECT_EQ(s.delta.size(), s.baseline.size());
  ASSERT_TRUE(r.combined.has_value());
  EXPECT_EQ(r.combined->dof, 2 * r.subs.size());
  const PairedResult again = paired_eval(f.m, f.corpus.eval(), c);
  for (std::size_t k = 0; k < r.subs.size(); ++k) {
    EXPECT_EQ(r.subs[k].delta, again.subs[k].delta);
    EXPECT_EQ(r.subs[k].sample_indices, again.subs[k].sample_indices);
    EXPECT_EQ(r.subs[k].probe_b, again.subs[k].probe_b);
  }
}

TEST(PairedEval, UnpairedArmsDrawDifferentSamples) {
  Fixture f = small_fixture(2);
  PairedEvalConfig c = small_eval();
  c.sub_experiments = 1;
  c.corruption.fraction = 0.0;
  c.corruption.paired = false;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  bool any_nonzero = false;
  for (double d : r.subs[0].delta) any_nonzero |= d != 0.0;
  EXPECT_TRUE(any_nonzero);
}

TEST(PairedEval, BaselineArmMatchesUncorruptedForward) {
  Fixture f = small_fixture(2);
  PairedEvalConfig c = small_eval();
  c.sub_experiments = 1;
  c.corruption.fraction = 0.5;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  const SubExperiment& s = r.subs[0];
  // Recompute the first sample's score independently.
  const auto& row = f.corpus.eval()[s.sample_indices[0]];
  Tensor tokens({1, 8});
  for (std::size_t t = 0; t < 8; ++t) tokens.at(0, t) = static_cast<double>(row[t]);
  const Tensor logits = model::lm_forward(f.m, tokens).logits;
  double nll = 0;
  for (std::size_t t = 0; t < 8; ++t) {
    double mx = -1e300;
    for (std::size_t v = 0; v < model::kVocab; ++v) mx = std::max(mx, logits[t * model::kVocab + v]);
    double z = 0;
    for (std::size_t v = 0; v < model::kVocab; ++v) z += std::exp(logits[t * model::kVocab + v] - mx);
    nll -= logits[t * model::kVocab + row[t + 1]] - mx - std::log(z);
  }
  EXPECT_NEAR(s.baseline[0], std::exp(-nll / 8), 1e-12);
}

TEST(PairedEval, Rejections) {
  Fixture one = small_fixture(1);
  EXPECT_THROW(paired_eval(one.m, one.corpus.eval(), small_eval()), std::invalid_argument);
  Fixture f = small_fixture(2);
  EXPECT_THROW(paired_eval(f.m, {}, small_eval()), std::invalid_argument);
  PairedEvalConfig c = small_eval();
  c.seq = 9;
  EXPECT_THROW(paired_eval(f.m, f.corpus.eval(), c), std::invalid_argument);
}

TEST(PairedEval, CsvAndConfig) {
  Fixture f = small_fixture(2);
  PairedEvalConfig c = small_eval();
  c.sub_experiments = 2;
  const PairedResult r = paired_eval(f.m, f.corpus.eval(), c);
  const auto dir = std::filesystem::temp_directory_path() / "ndlab_intervention_test";
  std::filesystem::create_directories(dir);
  write_intervention_csv(dir / "intervention.csv", r);
  write_combined_csv(dir / "intervention_combined.csv", r);
  const CsvTable t = read_csv(dir / "intervention.csv");
  EXPECT_EQ(t.header, (std::vector<std::string>{"subexp", "n", "delta_dspec", "mean_delta", "t", "p"}));
  EXPECT_EQ(t.rows.size(), 2u);
  const CsvTable comb = read_csv(dir / "intervention_combined.csv");
  EXPECT_EQ(comb.header, (std::vector<std::string>{"chi2", "dof", "p"}));
  EXPECT_EQ(comb.rows.at(0).at(1), "4");
  std::filesystem::remove_all(dir);

  c.corruption.target_streams = {1};
  c.corruption.donor = 0;
  KvConfig kv;
  write_corrupt_config(c, kv);
  const PairedEvalConfig back = read_corrupt_config(KvConfig::parse(kv.to_text()));
  KvConfig kv2;
  write_corrupt_config(back, kv2);
  EXPECT_EQ(kv.to_text(), kv2.to_text());
  EXPECT_EQ(back.corruption.donor, std::optional<std::size_t>(0));
}

}  // namespace
}  // namespace ndlab::intervention
