#pragma once

// Ground-truth evaluation of explanation methods on a synthetic corpus.
//
// Features are matched to topics through the mean validation hidden state of
// each topic: feature c goes to argmax_t relu(mu_t . W_c) (ties: lower topic).
// Match quality is the margin between the best and second-best topic of the
// unit-normalised projection; the best `features_per_topic` features of every
// topic are evaluated.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saex/activation_store.hpp"
#include "saex/explainer.hpp"
#include "saex/sae.hpp"
#include "saex/topicgen.hpp"
#include "saex/train.hpp"

namespace saex {

inline constexpr const char* kEvalReportVersion = "saex-eval/1";

struct EvalConfig {
  std::size_t top_m = 10;
  SpanOptions spans{};
  double n2g_tau = 0.1;
  std::optional<double> min_emission_quantile;
  std::size_t features_per_topic = 3;
  std::size_t vocab_min_count = 1;
};

inline nlohmann::json to_json(const EvalConfig& c) {
  return {{"top_m", c.top_m},
          {"span_len", c.spans.span_len},
          {"top_n_spans", c.spans.top_n},
          {"n2g_tau", c.n2g_tau},
          {"min_emission_quantile", c.min_emission_quantile ? nlohmann::json(*c.min_emission_quantile) : nlohmann::json(nullptr)},
          {"features_per_topic", c.features_per_topic},
          {"vocab_min_count", c.vocab_min_count}};
}

struct FeatureMatch {
  std::uint32_t feature_id = 0;
  std::uint32_t topic_id = 0;
  double margin = 0.0;
};

inline Matrix<double> topic_mean_states(const ActivationStore& store, const GroundTruth& gt) {
  Matrix<double> mean(gt.n_topics(), store.dim());
  std::vector<std::size_t> counts(gt.n_topics(), 0);
  for (const auto& shard : store.shards()) {
    for (std::size_t r = 0; r < shard.n_rows(); ++r) {
      const auto doc = shard.doc_ids[r];
      require(doc < gt.doc_topic.size(), ErrorKind::UnknownTopic, "document " + std::to_string(doc) + " has no topic");
      const auto t = gt.doc_topic[doc];
      require(t < gt.n_topics(), ErrorKind::UnknownTopic, "topic " + std::to_string(t) + " is unknown");
      auto row = shard.data.row(r);
      for (std::size_t d = 0; d < row.size(); ++d) mean(t, d) += row[d];
      ++counts[t];
    }
  }
  for (std::size_t t = 0; t < gt.n_topics(); ++t)
    if (counts[t])
      for (double& v : mean.row(t)) v /= static_cast<double>(counts[t]);
  return mean;
}

inline std::vector<FeatureMatch> match_features_to_topics(const SaeModel& model, const Matrix<double>& topic_means,
                                                          std::size_t per_topic) {
  std::vector<std::vector<FeatureMatch>> by_topic(topic_means.rows());
  for (std::size_t c = 0; c < model.num_features(); ++c) {
    const double norm = std::sqrt(squared_norm(model.weights.row(c)));
    if (norm == 0.0) continue;
    double best = 0.0, second = 0.0;
    std::size_t best_t = 0;
    bool any = false;
    for (std::size_t t = 0; t < topic_means.rows(); ++t) {
      const double p = std::max(0.0, dot(topic_means.row(t), model.weights.row(c))) / norm;
      if (!any || p > best) {
        if (any) second = best;
        best = p;
        best_t = t;
        any = true;
      } else if (p > second) {
        second = p;
      }
    }
    if (!any || best <= 0.0) continue;
    by_topic[best_t].push_back({static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(best_t), best - second});
  }
  std::vector<FeatureMatch> matched;
  for (auto& list : by_topic) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.margin > b.margin; });
    for (std::size_t i = 0; i < std::min(per_topic, list.size()); ++i) matched.push_back(list[i]);
  }
  return matched;
}

// Distinct tokens of the span explanations ranked by summed activation
// (ties: lower id). Masked positions are skipped.
inline std::vector<std::uint32_t> span_word_ranking(const std::vector<SpanRecord>& spans) {
  std::map<std::uint32_t, double> mass;
  for (const auto& s : spans)
    for (std::size_t i = 0; i < s.tokens.size(); ++i)
      if (!s.masked(i)) mass[s.tokens[i]] += s.token_activations[i];
  std::vector<std::pair<std::uint32_t, double>> ranked(mass.begin(), mass.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::uint32_t> words;
  for (const auto& [id, m] : ranked) words.push_back(id);
  return words;
}

// Distinct tokens / total tokens over all items, ignoring masks.
inline double distinct_token_ratio(const Explanation& ex) {
  std::set<std::uint32_t> distinct;
  std::size_t total = 0;
  for (const auto& it : ex.items)
    for (auto t : it.tokens)
      if (t != kMaskToken) {
        distinct.insert(t);
        ++total;
      }
  return total ? static_cast<double>(distinct.size()) / static_cast<double>(total) : 0.0;
}

struct MethodScores {
  double topic_precision = 0.0;
  double pattern_leakage = 0.0;
  double distinct_ratio = 0.0;
};

struct FeatureEvaluation {
  FeatureMatch match;
  std::map<ExplainMethod, MethodScores> scores;
};

struct EvalReport {
  std::vector<FeatureEvaluation> features;
  std::map<ExplainMethod, MethodScores> means;
  std::vector<Explanation> explanations;  // for the matched features, all methods
  std::size_t num_features = 0;
  std::size_t dead_features = 0;
  double valid_loss = 0.0;
  std::size_t vocab_size = 0;
  EvalConfig config;
};

inline EvalReport evaluate(const SaeModel& model, const EmbeddingMatrix& emb, const ActivationStore& train_rows,
                           const ActivationStore& valid_rows, const GroundTruth& gt, const EvalConfig& cfg) {
  model.validate();
  require(valid_rows.total_rows() > 0, ErrorKind::EmptyResult, "validation store is empty");
  require(valid_rows.dim() == model.dim(), ErrorKind::DimensionMismatch, "validation rows do not match model dim");

  EvalReport report;
  report.config = cfg;
  report.num_features = model.num_features();
  const Matrix<float> valid = detail::gather_rows(valid_rows);
  report.valid_loss = validation_loss(model, valid, model.k);
  report.dead_features = count_dead_features(model, valid, model.k);

  const Vocabulary vocab = build_vocab(train_rows, emb.vocab, cfg.vocab_min_count);
  report.vocab_size = vocab.ids.size();
  const EmbeddingMatrix sub = emb.subset(vocab.ids);
  const ScoreTable table = mi_scores(model, sub);
  const MiOptions mi_opts{std::min(cfg.top_m, sub.vocab_size()), cfg.min_emission_quantile};

  const auto matches = match_features_to_topics(model, topic_mean_states(valid_rows, gt), cfg.features_per_topic);
  for (const auto& match : matches) {
    FeatureEvaluation fe{match, {}};

    Explanation mi = explain_mi(table, match.feature_id, sub.vocab, mi_opts, vocab.ids);
    std::vector<std::uint32_t> mi_words;
    for (const auto& it : mi.items) mi_words.push_back(it.tokens.front());
    fe.scores[ExplainMethod::MI] = {topic_recovery_precision(mi_words, gt, match.topic_id, cfg.top_m),
                                    pattern_leakage(mi, gt.pattern_tokens, cfg.top_m), distinct_token_ratio(mi)};

    const auto spans = topact_explain(model, valid_rows, match.feature_id, cfg.spans);
    Explanation topact = spans_to_explanation(match.feature_id, ExplainMethod::TopAct, spans, emb.vocab);
    fe.scores[ExplainMethod::TopAct] = {
        topic_recovery_precision(span_word_ranking(spans), gt, match.topic_id, cfg.top_m),
        pattern_leakage(topact, gt.pattern_tokens, cfg.spans.top_n), distinct_token_ratio(topact)};

    std::vector<SpanRecord> refined;
    for (const auto& s : spans) refined.push_back(n2g_refine(s, model, match.feature_id, cfg.n2g_tau));
    Explanation n2g = spans_to_explanation(match.feature_id, ExplainMethod::N2G, refined, emb.vocab);
    fe.scores[ExplainMethod::N2G] = {
        topic_recovery_precision(span_word_ranking(refined), gt, match.topic_id, cfg.top_m),
        pattern_leakage(n2g, gt.pattern_tokens, cfg.spans.top_n), distinct_token_ratio(n2g)};

    report.explanations.push_back(std::move(mi));
    report.explanations.push_back(std::move(topact));
    report.explanations.push_back(std::move(n2g));
    report.features.push_back(std::move(fe));
  }

  for (auto method : {ExplainMethod::MI, ExplainMethod::TopAct, ExplainMethod::N2G}) {
    MethodScores mean;
    for (const auto& fe : report.features) {
      const auto& s = fe.scores.at(method);
      mean.topic_precision += s.topic_precision;
      mean.pattern_leakage += s.pattern_leakage;
      mean.distinct_ratio += s.distinct_ratio;
    }
    if (!report.features.empty()) {
      const double n = static_cast<double>(report.features.size());
      mean.topic_precision /= n;
      mean.pattern_leakage /= n;
      mean.distinct_ratio /= n;
    }
    report.means[method] = mean;
  }
  return report;
}

inline nlohmann::json to_json(const MethodScores& s) {
  return {{"topic_precision", s.topic_precision},
          {"pattern_leakage", s.pattern_leakage},
          {"distinct_ratio", s.distinct_ratio}};
}

// `provenance` carries seeds and artifact identities supplied by the caller.
inline nlohmann::json to_json(const EvalReport& r, const nlohmann::json& provenance = nlohmann::json::object()) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& [m, s] : r.means) {
    auto j = to_json(s);
    j["method"] = to_string(m);
    methods.push_back(j);
  }
  nlohmann::json features = nlohmann::json::array();
  for (const auto& fe : r.features) {
    nlohmann::json per;
    for (const auto& [m, s] : fe.scores) per[to_string(m)] = to_json(s);
    features.push_back({{"feature_id", fe.match.feature_id},
                        {"topic_id", fe.match.topic_id},
                        {"margin", fe.match.margin},
                        {"scores", per}});
  }
  return {{"version", kEvalReportVersion},
          {"methods", methods},
          {"features", features},
          {"matched_features", r.features.size()},
          {"num_features", r.num_features},
          {"dead_features", r.dead_features},
          {"valid_loss", r.valid_loss},
          {"vocab_size", r.vocab_size},
          {"settings", to_json(r.config)},
          {"provenance", provenance}};
}

}  // namespace saex
