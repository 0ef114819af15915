#pragma once

// Synthetic corpus with known discourse topics.
//
// Each document starts at a topic seed c_0 and walks c_n = c_{n-1} + eps_n,
// eps_n ~ N(0, sigma^2 I). Token x_n is drawn from softmax_v(<e_v, c_n>), or,
// with probability pattern_rate, uniformly from a small set of pattern tokens
// (replacement, so document length is fixed). Hidden states superpose the
// discourse and word components: h_n = c_n + e_{x_n} + eta.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saex/activation_store.hpp"
#include "saex/error.hpp"
#include "saex/explainer.hpp"
#include "saex/matrix.hpp"
#include "saex/parallel.hpp"
#include "saex/random.hpp"

namespace saex {

struct TopicModelConfig {
  EmbeddingMatrix vocab_embeddings;  // e_v; its dim is the discourse dim d
  double sigma = 0.02;
  std::size_t doc_length = 64;
  std::size_t n_topics = 8;
  std::size_t docs_per_topic = 200;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> pattern_tokens;
  double pattern_rate = 0.0;
  double hidden_noise = 0.01;  // std of eta
  std::size_t top_g = 50;      // ground-truth words per topic
  double max_topic_dot = 0.3;  // rejection threshold between topic seeds
  std::size_t threads = 1;

  std::size_t dim() const noexcept { return vocab_embeddings.dim(); }

  void validate() const {
    require(sigma >= 0.0 && std::isfinite(sigma), ErrorKind::InvalidArgument, "sigma must be >= 0");
    require(pattern_rate >= 0.0 && pattern_rate <= 1.0, ErrorKind::InvalidArgument, "pattern_rate must be in [0,1]");
    require(hidden_noise >= 0.0, ErrorKind::InvalidArgument, "hidden_noise must be >= 0");
    require(vocab_embeddings.vocab_size() >= 1 && dim() >= 1, ErrorKind::InvalidArgument, "empty vocabulary");
    require(pattern_rate == 0.0 || !pattern_tokens.empty(), ErrorKind::InvalidArgument,
            "pattern_rate > 0 needs pattern tokens");
    for (auto p : pattern_tokens)
      require(p < vocab_embeddings.vocab_size(), ErrorKind::IndexOutOfRange, "pattern token outside vocabulary");
    require(top_g >= 1 && top_g <= vocab_embeddings.vocab_size(), ErrorKind::InvalidArgument,
            "top_g must lie in [1, V]");
  }
};

struct SyntheticDocument {
  std::vector<std::uint32_t> tokens;
  Matrix<double> trajectory;  // (N+1) x d, row 0 is the topic seed
  Matrix<double> steps;       // N x d, trajectory[n] = trajectory[n-1] + steps[n-1]
  std::uint32_t topic_id = 0;
};

// Random vocabulary embeddings e_v ~ N(0, scale^2 I). The first n_pattern ids
// are named "pat<i>", the rest "w<i>".
inline EmbeddingMatrix make_vocab_embeddings(std::size_t vocab_size, std::size_t dim, double scale,
                                             std::size_t n_pattern, std::uint64_t seed) {
  require(n_pattern <= vocab_size, ErrorKind::InvalidArgument, "more pattern tokens than vocabulary");
  EmbeddingMatrix emb{Matrix<float>(vocab_size, dim), {}};
  Rng rng(derive_seed(seed, {0x766f6361ULL}));
  std::normal_distribution<double> normal(0.0, scale);
  for (float& v : emb.data.flat()) v = static_cast<float>(normal(rng));
  char name[32];
  for (std::size_t i = 0; i < vocab_size; ++i) {
    if (i < n_pattern)
      std::snprintf(name, sizeof name, "pat%zu", i);
    else
      std::snprintf(name, sizeof name, "w%04zu", i);
    emb.vocab.emplace_back(name);
  }
  return emb;
}

inline std::vector<double> emission_logits(const EmbeddingMatrix& emb, std::span<const double> discourse) {
  std::vector<double> logits(emb.vocab_size());
  for (std::size_t v = 0; v < logits.size(); ++v) logits[v] = dot(emb.data.row(v), discourse);
  return logits;
}

// p(x | c) = softmax_v(<e_v, c>)
inline std::vector<double> emission_probs(const EmbeddingMatrix& emb, std::span<const double> discourse) {
  return softmax(emission_logits(emb, discourse));
}

namespace detail {

inline std::uint32_t sample_categorical(std::span<const double> probs, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<std::uint32_t>(i);
  }
  // u landed in the rounding slack past the last cumulative sum
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return static_cast<std::uint32_t>(i);
  return 0;
}

}  // namespace detail

inline SyntheticDocument sample_document(const TopicModelConfig& cfg, std::span<const double> topic_seed, Rng& rng,
                                         std::uint32_t topic_id = 0) {
  const std::size_t d = cfg.dim();
  const std::size_t n = cfg.doc_length;
  require(topic_seed.size() == d, ErrorKind::DimensionMismatch, "topic seed dim differs from embedding dim");
  SyntheticDocument doc{std::vector<std::uint32_t>(n), Matrix<double>(n + 1, d), Matrix<double>(n, d), topic_id};
  std::ranges::copy(topic_seed, doc.trajectory.row(0).begin());

  std::normal_distribution<double> noise(0.0, cfg.sigma > 0.0 ? cfg.sigma : 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> probs;
  bool probs_valid = false;
  for (std::size_t i = 1; i <= n; ++i) {
    auto prev = doc.trajectory.row(i - 1);
    auto cur = doc.trajectory.row(i);
    auto step = doc.steps.row(i - 1);
    bool moved = false;
    for (std::size_t k = 0; k < d; ++k) {
      step[k] = cfg.sigma > 0.0 ? noise(rng) : 0.0;
      cur[k] = prev[k] + step[k];
      moved = moved || step[k] != 0.0;
    }
    if (moved || !probs_valid) {
      probs = emission_probs(cfg.vocab_embeddings, cur);
      probs_valid = true;
    }
    const double coin = unit(rng);
    const double u = unit(rng);
    if (coin < cfg.pattern_rate) {
      const auto j = std::min(static_cast<std::size_t>(u * static_cast<double>(cfg.pattern_tokens.size())),
                              cfg.pattern_tokens.size() - 1);
      doc.tokens[i - 1] = cfg.pattern_tokens[j];
    } else {
      doc.tokens[i - 1] = detail::sample_categorical(probs, u);
    }
  }
  return doc;
}

// log p(X) = sum_n [ log p(x_n | c_n) + log p(c_n | c_{n-1}) ] with the walk
// density taken exactly as 1/(sqrt(2 pi) sigma) * exp(-|c_n - c_{n-1}|_2 / (2 sigma)).
// That density is not a normalised d-dimensional Gaussian; it is evaluated
// as written. Only defined for the pure model (no pattern injection).
inline double log_prob(const SyntheticDocument& doc, const TopicModelConfig& cfg) {
  require(cfg.pattern_rate == 0.0, ErrorKind::InvalidArgument, "log_prob is defined for pattern_rate = 0 only");
  require(doc.trajectory.rows() == doc.tokens.size() + 1, ErrorKind::InvalidArgument,
          "document is missing its discourse trajectory");
  if (doc.tokens.empty()) return 0.0;
  require(cfg.sigma > 0.0, ErrorKind::InvalidArgument, "log_prob needs sigma > 0");
  require(doc.trajectory.cols() == cfg.dim(), ErrorKind::DimensionMismatch, "trajectory dim differs from embeddings");
  const double log_norm = -std::log(std::sqrt(2.0 * std::numbers::pi) * cfg.sigma);
  double total = 0.0;
  for (std::size_t i = 1; i <= doc.tokens.size(); ++i) {
    const auto logits = emission_logits(cfg.vocab_embeddings, doc.trajectory.row(i));
    total += logits[doc.tokens[i - 1]] - detail::log_sum_exp(logits);
    double step_sq = 0.0;
    for (std::size_t k = 0; k < cfg.dim(); ++k) {
      const double diff = doc.trajectory(i, k) - doc.trajectory(i - 1, k);
      step_sq += diff * diff;
    }
    total += log_norm - std::sqrt(step_sq) / (2.0 * cfg.sigma);
  }
  return total;
}

// h_n = c_n + e_{x_n} + eta, eta ~ N(0, hidden_noise^2 I); rows n = 1..N.
inline ActivationShard emit_hidden_states(const SyntheticDocument& doc, const TopicModelConfig& cfg, Rng& rng,
                                          std::uint32_t doc_id = 0) {
  const std::size_t d = cfg.dim();
  const std::size_t n = doc.tokens.size();
  ActivationShard shard{Matrix<float>(n, d), doc.tokens, std::vector<std::uint32_t>(n, doc_id), "synthetic"};
  std::normal_distribution<double> eta(0.0, cfg.hidden_noise > 0.0 ? cfg.hidden_noise : 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto e = cfg.vocab_embeddings.data.row(doc.tokens[i]);
    auto c = doc.trajectory.row(i + 1);
    auto h = shard.data.row(i);
    for (std::size_t k = 0; k < d; ++k) {
      const double noise = cfg.hidden_noise > 0.0 ? eta(rng) : 0.0;
      h[k] = static_cast<float>(c[k] + static_cast<double>(e[k]) + noise);
    }
  }
  return shard;
}

// Unit-norm Gaussian directions with pairwise dot products below max_dot.
inline Matrix<double> sample_topic_seeds(std::size_t n_topics, std::size_t dim, double max_dot, std::uint64_t seed) {
  Matrix<double> seeds(n_topics, dim);
  Rng rng(derive_seed(seed, {0x746f706963ULL}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  std::size_t accepted = 0;
  for (std::size_t attempt = 0; accepted < n_topics; ++attempt) {
    require(attempt < 100000 * (n_topics + 1), ErrorKind::InvalidArgument,
            "could not place topic seeds with pairwise dot < " + std::to_string(max_dot));
    for (double& x : v) x = normal(rng);
    const double norm = std::sqrt(squared_norm(std::span<const double>(v)));
    if (norm == 0.0) continue;
    for (double& x : v) x /= norm;
    bool ok = true;
    for (std::size_t j = 0; j < accepted && ok; ++j) ok = dot(seeds.row(j), std::span<const double>(v)) < max_dot;
    if (!ok) continue;
    std::ranges::copy(v, seeds.row(accepted).begin());
    ++accepted;
  }
  return seeds;
}

struct GroundTruth {
  Matrix<double> topic_seeds;                           // n_topics x d
  std::vector<std::vector<std::uint32_t>> top_words;    // per topic, by emission prob descending
  std::vector<std::uint32_t> doc_topic;                 // indexed by doc id
  std::vector<std::uint32_t> pattern_tokens;

  std::size_t n_topics() const noexcept { return top_words.size(); }
};

struct SyntheticCorpus {
  std::vector<SyntheticDocument> documents;  // doc id = position
  std::vector<ActivationShard> hidden;       // one single-document shard per document
};

inline std::uint32_t doc_id_of(std::size_t topic, std::size_t index, std::size_t docs_per_topic) {
  return static_cast<std::uint32_t>(topic * docs_per_topic + index);
}

// Top-g words by emission probability under the topic seed (ties: lower id).
inline std::vector<std::uint32_t> top_emission_words(const EmbeddingMatrix& emb, std::span<const double> seed,
                                                     std::size_t g) {
  const auto logits = emission_logits(emb, seed);
  std::vector<std::uint32_t> ids(logits.size());
  std::iota(ids.begin(), ids.end(), std::uint32_t{0});
  g = std::min(g, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(g), ids.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  ids.resize(g);
  return ids;
}

// Every document draws from its own generator seeded by (seed, topic, index),
// so the corpus is identical whatever the generation order or thread count.
inline std::pair<SyntheticCorpus, GroundTruth> generate_corpus(const TopicModelConfig& cfg) {
  cfg.validate();
  require(cfg.n_topics >= 1, ErrorKind::InvalidArgument, "n_topics must be >= 1");
  GroundTruth gt;
  gt.topic_seeds = sample_topic_seeds(cfg.n_topics, cfg.dim(), cfg.max_topic_dot, cfg.seed);
  gt.pattern_tokens = cfg.pattern_tokens;
  for (std::size_t t = 0; t < cfg.n_topics; ++t)
    gt.top_words.push_back(top_emission_words(cfg.vocab_embeddings, gt.topic_seeds.row(t), cfg.top_g));

  const std::size_t total = cfg.n_topics * cfg.docs_per_topic;
  SyntheticCorpus corpus{std::vector<SyntheticDocument>(total), std::vector<ActivationShard>(total)};
  gt.doc_topic.resize(total);
  parallel_chunks(total, cfg.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t id = begin; id < end; ++id) {
      const std::size_t topic = id / cfg.docs_per_topic;
      const std::size_t index = id % cfg.docs_per_topic;
      Rng rng(derive_seed(cfg.seed, {1, topic, index}));
      corpus.documents[id] = sample_document(cfg, gt.topic_seeds.row(topic), rng, static_cast<std::uint32_t>(topic));
      corpus.hidden[id] = emit_hidden_states(corpus.documents[id], cfg, rng, static_cast<std::uint32_t>(id));
      gt.doc_topic[id] = static_cast<std::uint32_t>(topic);
    }
  });
  return {std::move(corpus), std::move(gt)};
}

// |top-M explanation words in the topic's ground-truth list| / M. Rankings
// shorter than M count the missing positions as misses.
inline double topic_recovery_precision(std::span<const std::uint32_t> ranked_words, const GroundTruth& gt,
                                       std::size_t topic_id, std::size_t m) {
  require(topic_id < gt.n_topics(), ErrorKind::UnknownTopic, "topic " + std::to_string(topic_id) + " is unknown");
  require(m >= 1, ErrorKind::InvalidArgument, "M must be >= 1");
  const std::set<std::uint32_t> truth(gt.top_words[topic_id].begin(), gt.top_words[topic_id].end());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(m, ranked_words.size()); ++i) hits += truth.count(ranked_words[i]);
  return static_cast<double>(hits) / static_cast<double>(m);
}

// Word explanations: fraction of the top-M words that are pattern tokens.
// Span explanations: fraction of the top-M spans holding an unmasked pattern token.
inline double pattern_leakage(const Explanation& ex, std::span<const std::uint32_t> pattern_tokens, std::size_t m) {
  const std::set<std::uint32_t> patterns(pattern_tokens.begin(), pattern_tokens.end());
  const std::size_t n = std::min(m, ex.items.size());
  if (n == 0) return 0.0;
  std::size_t leaked = 0;
  for (std::size_t i = 0; i < n; ++i)
    leaked += std::ranges::any_of(ex.items[i].tokens, [&](std::uint32_t t) { return patterns.count(t) > 0; });
  return static_cast<double>(leaked) / static_cast<double>(n);
}

inline nlohmann::json to_json(const GroundTruth& gt) {
  nlohmann::json seeds = nlohmann::json::array();
  for (std::size_t t = 0; t < gt.topic_seeds.rows(); ++t)
    seeds.push_back(std::vector<double>(gt.topic_seeds.row(t).begin(), gt.topic_seeds.row(t).end()));
  return {{"topic_seeds", seeds},
          {"top_words", gt.top_words},
          {"doc_topic", gt.doc_topic},
          {"pattern_tokens", gt.pattern_tokens}};
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  try {
    GroundTruth gt;
    const auto seeds = j.at("topic_seeds").get<std::vector<std::vector<double>>>();
    const std::size_t d = seeds.empty() ? 0 : seeds.front().size();
    gt.topic_seeds = Matrix<double>(seeds.size(), d);
    for (std::size_t t = 0; t < seeds.size(); ++t) {
      require(seeds[t].size() == d, ErrorKind::SchemaMismatch, "ragged topic seeds");
      std::ranges::copy(seeds[t], gt.topic_seeds.row(t).begin());
    }
    gt.top_words = j.at("top_words").get<std::vector<std::vector<std::uint32_t>>>();
    gt.doc_topic = j.at("doc_topic").get<std::vector<std::uint32_t>>();
    gt.pattern_tokens = j.at("pattern_tokens").get<std::vector<std::uint32_t>>();
    require(gt.top_words.size() == gt.topic_seeds.rows(), ErrorKind::SchemaMismatch,
            "top_words and topic_seeds disagree on topic count");
    return gt;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("bad ground-truth document: ") + e.what());
  }
}

struct CorpusPaths {
  fs::path train_manifest;
  fs::path valid_manifest;
  fs::path embeddings;
  fs::path vocab;
  fs::path ground_truth;
};

inline CorpusPaths corpus_paths(const fs::path& dir) {
  return {dir / "train.manifest", dir / "valid.manifest", dir / "embeddings.saes", dir / "vocab.txt",
          dir / "ground_truth.json"};
}

// Writes one train and one validation shard per topic. The last
// round(valid_fraction * docs_per_topic) documents of each topic go to
// validation.
inline CorpusPaths write_corpus(const SyntheticCorpus& corpus, const GroundTruth& gt, const TopicModelConfig& cfg,
                                double valid_fraction, const fs::path& dir) {
  require(valid_fraction >= 0.0 && valid_fraction <= 1.0, ErrorKind::InvalidArgument,
          "valid_fraction must lie in [0, 1]");
  fs::create_directories(dir);
  const auto paths = corpus_paths(dir);
  const auto n_valid =
      static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(cfg.docs_per_topic)));
  std::vector<fs::path> train_files, valid_files;
  for (std::size_t t = 0; t < cfg.n_topics; ++t) {
    ActivationShard train_shard{Matrix<float>(), {}, {}, "synthetic"};
    ActivationShard valid_shard = train_shard;
    std::vector<float> train_data, valid_data;
    for (std::size_t j = 0; j < cfg.docs_per_topic; ++j) {
      const auto& h = corpus.hidden[doc_id_of(t, j, cfg.docs_per_topic)];
      const bool is_valid = j >= cfg.docs_per_topic - n_valid;
      auto& data = is_valid ? valid_data : train_data;
      auto& shard = is_valid ? valid_shard : train_shard;
      data.insert(data.end(), h.data.flat().begin(), h.data.flat().end());
      shard.token_ids.insert(shard.token_ids.end(), h.token_ids.begin(), h.token_ids.end());
      shard.doc_ids.insert(shard.doc_ids.end(), h.doc_ids.begin(), h.doc_ids.end());
    }
    train_shard.data = Matrix<float>(train_shard.token_ids.size(), cfg.dim(), std::move(train_data));
    valid_shard.data = Matrix<float>(valid_shard.token_ids.size(), cfg.dim(), std::move(valid_data));
    char name[64];
    std::snprintf(name, sizeof name, "train_t%02zu.saes", t);
    write_shard(train_shard, dir / name);
    train_files.emplace_back(name);
    std::snprintf(name, sizeof name, "valid_t%02zu.saes", t);
    write_shard(valid_shard, dir / name);
    valid_files.emplace_back(name);
  }
  write_manifest(train_files, paths.train_manifest);
  write_manifest(valid_files, paths.valid_manifest);
  save_embeddings(cfg.vocab_embeddings, paths.embeddings, paths.vocab);
  std::ofstream(paths.ground_truth) << to_json(gt).dump(1) << '\n';
  return paths;
}

inline GroundTruth read_ground_truth(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  try {
    return ground_truth_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::SchemaMismatch, std::string("ground truth is not valid JSON: ") + e.what());
  }
}

}  // namespace saex
