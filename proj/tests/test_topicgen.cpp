#include <gtest/gtest.h>

#include <numbers>

#include "expect_error.hpp"
#include "oracles.hpp"
#include "saex/topicgen.hpp"

using namespace saex;
using oracle::kind_of;

namespace {

TopicModelConfig small_config(std::uint64_t seed = 3) {
  TopicModelConfig cfg;
  cfg.vocab_embeddings = make_vocab_embeddings(60, 6, 0.5, 4, seed);
  cfg.n_topics = 3;
  cfg.docs_per_topic = 5;
  cfg.doc_length = 12;
  cfg.pattern_tokens = {0, 1, 2, 3};
  cfg.pattern_rate = 0.2;
  cfg.top_g = 10;
  cfg.seed = seed;
  return cfg;
}

std::vector<double> unit(std::size_t d, std::size_t k) {
  std::vector<double> v(d, 0.0);
  v[k] = 1.0;
  return v;
}

}  // namespace

TEST(Sampler, FrozenWalkMatchesEmissionDistribution) {
  TopicModelConfig cfg;
  cfg.vocab_embeddings = make_vocab_embeddings(30, 5, 0.7, 0, 11);
  cfg.sigma = 0.0;
  cfg.doc_length = 100000;
  Rng rng(1);
  const auto c0 = unit(5, 2);
  const auto doc = sample_document(cfg, c0, rng);
  const auto probs = emission_probs(cfg.vocab_embeddings, c0);
  std::vector<double> counts(30, 0.0);
  for (auto t : doc.tokens) counts[t] += 1.0;
  double chi2 = 0.0;
  for (std::size_t v = 0; v < 30; ++v) {
    const double expected = probs[v] * 100000.0;
    chi2 += (counts[v] - expected) * (counts[v] - expected) / expected;
  }
  EXPECT_LT(chi2, oracle::chi_square_critical_001(29.0));
}

TEST(Sampler, AlignedWordDominates) {
  TopicModelConfig cfg;
  Matrix<float> e(100, 8);
  e(0, 0) = 10.0f;
  for (std::size_t v = 1; v < 100; ++v) e(v, 1 + v % 7) = 0.3f;
  cfg.vocab_embeddings = EmbeddingMatrix{e, {}};
  for (std::size_t v = 0; v < 100; ++v) cfg.vocab_embeddings.vocab.push_back(std::to_string(v));
  cfg.sigma = 0.0;
  cfg.doc_length = 5000;
  Rng rng(2);
  const auto doc = sample_document(cfg, unit(8, 0), rng);
  const auto hits = std::ranges::count(doc.tokens, 0u);
  EXPECT_GT(static_cast<double>(hits) / 5000.0, 0.99);
}

TEST(Sampler, FullPatternRateEmitsOnlyPatternTokens) {
  auto cfg = small_config();
  cfg.pattern_rate = 1.0;
  cfg.doc_length = 500;
  Rng rng(3);
  const auto doc = sample_document(cfg, unit(6, 0), rng);
  for (auto t : doc.tokens) EXPECT_LT(t, 4u);
}

TEST(Sampler, WalkStepsHaveConfiguredSpread) {
  auto cfg = small_config();
  cfg.sigma = 0.1;
  cfg.doc_length = 4000;
  Rng rng(4);
  const auto doc = sample_document(cfg, unit(6, 0), rng);
  double sq = 0.0;
  for (double s : doc.steps.flat()) sq += s * s;
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(doc.steps.size())), 0.1, 0.005);
  for (std::size_t i = 1; i < doc.trajectory.rows(); ++i)
    for (std::size_t k = 0; k < 6; ++k)
      EXPECT_EQ(doc.trajectory(i, k), doc.trajectory(i - 1, k) + doc.steps(i - 1, k));
}

TEST(LogProb, ClosedFormExamples) {
  TopicModelConfig cfg;
  cfg.vocab_embeddings = EmbeddingMatrix{Matrix<float>(7, 3, 0.4f), {"a", "b", "c", "d", "e", "f", "g"}};
  cfg.sigma = 1.0;
  SyntheticDocument empty{{}, Matrix<double>(1, 3), Matrix<double>(0, 3), 0};
  EXPECT_EQ(log_prob(empty, cfg), 0.0);
  SyntheticDocument one{{4}, Matrix<double>{{1, 0, 0}, {1, 0, 0}}, Matrix<double>(1, 3), 0};
  EXPECT_NEAR(log_prob(one, cfg), std::log(1.0 / 7.0) + std::log(1.0 / std::sqrt(2.0 * std::numbers::pi)), 1e-12);
  cfg.pattern_rate = 0.5;
  cfg.pattern_tokens = {0};
  EXPECT_EQ(kind_of([&] { log_prob(one, cfg); }), ErrorKind::InvalidArgument);
}

TEST(LogProb, MatchesTermByTermOracle) {
  auto cfg = small_config();
  cfg.pattern_rate = 0.0;
  cfg.sigma = 0.3;
  Rng rng(5);
  const auto doc = sample_document(cfg, unit(6, 1), rng);
  double want = 0.0;
  for (std::size_t n = 1; n <= doc.tokens.size(); ++n) {
    double z = 0.0;
    for (std::size_t v = 0; v < 60; ++v) {
      double l = 0.0;
      for (std::size_t k = 0; k < 6; ++k) l += cfg.vocab_embeddings.data(v, k) * doc.trajectory(n, k);
      z += std::exp(l);
    }
    double l = 0.0, step = 0.0;
    for (std::size_t k = 0; k < 6; ++k) {
      l += cfg.vocab_embeddings.data(doc.tokens[n - 1], k) * doc.trajectory(n, k);
      const double diff = doc.trajectory(n, k) - doc.trajectory(n - 1, k);
      step += diff * diff;
    }
    want += l - std::log(z);
    want += std::log(1.0 / (std::sqrt(2.0 * std::numbers::pi) * 0.3)) - std::sqrt(step) / 0.6;
  }
  EXPECT_NEAR(log_prob(doc, cfg), want, 1e-9 * std::abs(want));
}

TEST(Hidden, NoiselessStatesAreSeedPlusEmbedding) {
  auto cfg = small_config();
  cfg.sigma = 0.0;
  cfg.hidden_noise = 0.0;
  Rng rng(6);
  const auto c0 = unit(6, 3);
  const auto doc = sample_document(cfg, c0, rng);
  const auto shard = emit_hidden_states(doc, cfg, rng, 42);
  ASSERT_EQ(shard.n_rows(), doc.tokens.size());
  EXPECT_EQ(shard.token_ids, doc.tokens);
  for (std::size_t n = 0; n < shard.n_rows(); ++n) {
    EXPECT_EQ(shard.doc_ids[n], 42u);
    for (std::size_t k = 0; k < 6; ++k)
      EXPECT_EQ(shard.data(n, k), static_cast<float>(c0[k] + cfg.vocab_embeddings.data(doc.tokens[n], k)));
  }
  Rng other(99);
  EXPECT_EQ(emit_hidden_states(doc, cfg, other, 42), shard);
}

TEST(Corpus, DeterministicAcrossRunsAndThreads) {
  auto cfg = small_config();
  const auto [a, gta] = generate_corpus(cfg);
  const auto [b, gtb] = generate_corpus(cfg);
  cfg.threads = 4;
  const auto [c, gtc] = generate_corpus(cfg);
  ASSERT_EQ(a.hidden.size(), 15u);
  for (std::size_t i = 0; i < a.hidden.size(); ++i) {
    EXPECT_TRUE(oracle::bitwise_equal(a.hidden[i], b.hidden[i]));
    EXPECT_TRUE(oracle::bitwise_equal(a.hidden[i], c.hidden[i]));
  }
  EXPECT_EQ(gta.top_words, gtc.top_words);
  EXPECT_EQ(gta.doc_topic, (std::vector<std::uint32_t>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2}));
  std::size_t tokens = 0;
  for (const auto& h : a.hidden) tokens += h.n_rows();
  EXPECT_EQ(tokens, 3u * 5u * 12u);
}

TEST(Corpus, EmptyTopicsStillHaveGroundTruth) {
  auto cfg = small_config();
  cfg.docs_per_topic = 0;
  const auto [corpus, gt] = generate_corpus(cfg);
  EXPECT_TRUE(corpus.documents.empty());
  EXPECT_EQ(gt.n_topics(), 3u);
  EXPECT_EQ(gt.top_words[0].size(), 10u);
}

TEST(Corpus, TopicSeedsAreUnitAndSpread) {
  const auto seeds = sample_topic_seeds(8, 32, 0.3, 5);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(squared_norm(seeds.row(i)), 1.0, 1e-12);
    for (std::size_t j = 0; j < i; ++j) EXPECT_LT(dot(seeds.row(i), seeds.row(j)), 0.3);
  }
  EXPECT_EQ(kind_of([] { sample_topic_seeds(3, 1, 0.3, 1); }), ErrorKind::InvalidArgument);
}

TEST(Corpus, TopWordsAreSortedByEmission) {
  const auto emb = make_vocab_embeddings(80, 4, 1.0, 0, 8);
  const auto seed = unit(4, 1);
  const auto words = top_emission_words(emb, seed, 20);
  const auto probs = emission_probs(emb, seed);
  for (std::size_t i = 1; i < words.size(); ++i) EXPECT_GE(probs[words[i - 1]], probs[words[i]]);
  std::size_t above = 0;
  for (double p : probs) above += p > probs[words.back()];
  EXPECT_EQ(above, 19u);
}

TEST(Corpus, WrittenFilesRoundTrip) {
  oracle::TempDir dir;
  const auto cfg = small_config();
  const auto [corpus, gt] = generate_corpus(cfg);
  const auto paths = write_corpus(corpus, gt, cfg, 0.2, dir.path());
  const auto train = ActivationStore::open(paths.train_manifest);
  const auto valid = ActivationStore::open(paths.valid_manifest);
  EXPECT_EQ(train.total_rows(), 3u * 4u * 12u);
  EXPECT_EQ(valid.total_rows(), 3u * 1u * 12u);
  const auto back = read_ground_truth(paths.ground_truth);
  EXPECT_EQ(back.top_words, gt.top_words);
  EXPECT_EQ(back.doc_topic, gt.doc_topic);
  EXPECT_EQ(back.topic_seeds, gt.topic_seeds);
  EXPECT_EQ(load_embeddings(paths.embeddings, paths.vocab).vocab, cfg.vocab_embeddings.vocab);
  write_lines({"{\"top_words\": []}"}, dir / "bad.json");
  EXPECT_EQ(kind_of([&] { read_ground_truth(dir / "bad.json"); }), ErrorKind::SchemaMismatch);
}

TEST(Metrics, PrecisionCounting) {
  GroundTruth gt;
  gt.top_words = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};
  const std::vector<std::uint32_t> exact{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
  const std::vector<std::uint32_t> disjoint{20, 21, 22, 23, 24, 25, 26, 27, 28, 29};
  const std::vector<std::uint32_t> half{0, 20, 1, 21, 2, 22, 3, 23, 4, 24};
  EXPECT_EQ(topic_recovery_precision(exact, gt, 0, 10), 1.0);
  EXPECT_EQ(topic_recovery_precision(disjoint, gt, 0, 10), 0.0);
  EXPECT_EQ(topic_recovery_precision(half, gt, 0, 10), 0.5);
  EXPECT_EQ(topic_recovery_precision(std::vector<std::uint32_t>{0, 1}, gt, 0, 10), 0.2);
  EXPECT_EQ(kind_of([&] { topic_recovery_precision(exact, gt, 1, 10); }), ErrorKind::UnknownTopic);
}

TEST(Metrics, LeakageCounting) {
  const std::vector<std::uint32_t> patterns{100, 101};
  Explanation words;
  for (std::uint32_t t : {100u, 5u, 101u, 6u, 7u, 100u, 8u, 9u, 10u, 11u}) words.items.push_back({"", 0.0, {t}});
  EXPECT_NEAR(pattern_leakage(words, patterns, 10), 0.3, 1e-15);
  Explanation only;
  for (std::uint32_t t : {100u, 101u}) only.items.push_back({"", 0.0, {t}});
  EXPECT_EQ(pattern_leakage(only, patterns, 10), 1.0);
  Explanation spans;
  spans.items.push_back({"", 0.0, {1, 100, 2}});
  spans.items.push_back({"", 0.0, {1, kMaskToken, 2}});
  EXPECT_EQ(pattern_leakage(spans, patterns, 10), 0.5);
  EXPECT_EQ(pattern_leakage(Explanation{}, patterns, 10), 0.0);
}

TEST(Config, Validation) {
  auto cfg = small_config();
  cfg.pattern_tokens = {};
  EXPECT_EQ(kind_of([&] { generate_corpus(cfg); }), ErrorKind::InvalidArgument);
  cfg = small_config();
  cfg.pattern_tokens = {60};
  EXPECT_EQ(kind_of([&] { generate_corpus(cfg); }), ErrorKind::IndexOutOfRange);
  cfg = small_config();
  cfg.sigma = -1.0;
  EXPECT_EQ(kind_of([&] { generate_corpus(cfg); }), ErrorKind::InvalidArgument);
}
