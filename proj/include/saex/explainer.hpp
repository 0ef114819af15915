#pragma once

// Feature explanations.
//
// MI: score(c, w) = p(w | W_c) * log p(W_c | w), where both conditionals are
// softmaxes of the same logits <e_w, W_c>, normalised over the vocabulary and
// over the features respectively. The M-word explanation of feature c is the
// top-M of row c (the objective is additive over words, so greedy is exact).
//
// TopAct / N2G: activation-based span baselines over a token corpus.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "saex/activation_store.hpp"
#include "saex/error.hpp"
#include "saex/matrix.hpp"
#include "saex/sae.hpp"

namespace saex {

enum class ExplainMethod { MI, TopAct, N2G };

inline std::string to_string(ExplainMethod m) {
  switch (m) {
    case ExplainMethod::MI: return "MI";
    case ExplainMethod::TopAct: return "TopAct";
    case ExplainMethod::N2G: return "N2G";
  }
  return "?";
}

inline ExplainMethod parse_method(const std::string& s) {
  if (s == "MI") return ExplainMethod::MI;
  if (s == "TopAct") return ExplainMethod::TopAct;
  if (s == "N2G") return ExplainMethod::N2G;
  fail(ErrorKind::SchemaMismatch, "unknown explanation method '" + s + "'");
}

inline constexpr std::uint32_t kMaskToken = std::numeric_limits<std::uint32_t>::max();
inline constexpr const char* kMaskText = "[MASK]";

struct ExplanationItem {
  std::string text;
  double score = 0.0;
  std::vector<std::uint32_t> tokens;  // vocabulary ids; kMaskToken for masked positions
};

struct Explanation {
  std::uint32_t feature_id = 0;
  ExplainMethod method = ExplainMethod::MI;
  std::vector<ExplanationItem> items;
  std::optional<std::string> summary;
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::ranges::max_element(v);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline void check_dims(const SaeModel& model, const EmbeddingMatrix& emb) {
  require(emb.dim() == model.dim(), ErrorKind::DimensionMismatch,
          "embedding dim " + std::to_string(emb.dim()) + " != model dim " + std::to_string(model.dim()));
}

}  // namespace detail

// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double m = *std::ranges::max_element(p);
  double s = 0.0;
  for (double& x : p) s += (x = std::exp(x - m));
  for (double& x : p) x /= s;
  return p;
}

// p(w | W_c) over the vocabulary.
inline std::vector<double> word_given_feature(const SaeModel& model, const EmbeddingMatrix& emb, std::size_t c) {
  detail::check_dims(model, emb);
  require(c < model.num_features(), ErrorKind::IndexOutOfRange, "feature index out of range");
  std::vector<double> logits(emb.vocab_size());
  for (std::size_t w = 0; w < logits.size(); ++w) logits[w] = dot(emb.data.row(w), model.weights.row(c));
  return softmax(logits);
}

// p(W_c | w) over the features.
inline std::vector<double> feature_given_word(const SaeModel& model, const EmbeddingMatrix& emb, std::size_t w) {
  detail::check_dims(model, emb);
  require(w < emb.vocab_size(), ErrorKind::IndexOutOfRange, "word index out of range");
  std::vector<double> logits(model.num_features());
  for (std::size_t c = 0; c < logits.size(); ++c) logits[c] = dot(emb.data.row(w), model.weights.row(c));
  return softmax(logits);
}

struct ScoreTable {
  Matrix<double> scores;    // C x V, every entry <= 0
  Matrix<double> emission;  // p(w | W_c), rows sum to 1

  std::size_t num_features() const noexcept { return scores.rows(); }
  std::size_t vocab_size() const noexcept { return scores.cols(); }
};

// log p(W_c | w) is taken as logit minus the column log-sum-exp rather than
// log(softmax), so it stays finite when the probability underflows.
inline ScoreTable mi_scores(const SaeModel& model, const EmbeddingMatrix& emb) {
  detail::check_dims(model, emb);
  const std::size_t c_count = model.num_features();
  const std::size_t v_count = emb.vocab_size();
  Matrix<double> logits(c_count, v_count);
  for (std::size_t c = 0; c < c_count; ++c)
    for (std::size_t w = 0; w < v_count; ++w) logits(c, w) = dot(emb.data.row(w), model.weights.row(c));

  std::vector<double> col_lse(v_count);
  std::vector<double> column(c_count);
  for (std::size_t w = 0; w < v_count; ++w) {
    for (std::size_t c = 0; c < c_count; ++c) column[c] = logits(c, w);
    col_lse[w] = detail::log_sum_exp(column);
  }

  ScoreTable table{Matrix<double>(c_count, v_count), Matrix<double>(c_count, v_count)};
  for (std::size_t c = 0; c < c_count; ++c) {
    const double row_lse = detail::log_sum_exp(logits.row(c));
    for (std::size_t w = 0; w < v_count; ++w) {
      const double p_word = std::exp(logits(c, w) - row_lse);
      const double log_p_feature = logits(c, w) - col_lse[w];
      table.emission(c, w) = p_word;
      table.scores(c, w) = p_word * log_p_feature;
    }
  }
  return table;
}

struct MiOptions {
  std::size_t top_m = 10;
  // When set, words whose p(w | W_c) falls below this quantile of row c are
  // dropped before ranking.
  std::optional<double> min_emission_quantile;
};

// Top-M words of row c by score; ties go to the lower vocabulary index.
// `token_ids` maps table columns to vocabulary ids (identity when empty).
inline Explanation explain_mi(const ScoreTable& table, std::size_t c, const std::vector<std::string>& vocab,
                              const MiOptions& opts = {}, std::span<const std::uint32_t> token_ids = {}) {
  require(c < table.num_features(), ErrorKind::IndexOutOfRange, "feature index out of range");
  require(vocab.size() == table.vocab_size(), ErrorKind::CountMismatch, "vocab size does not match score table");
  require(opts.top_m <= table.vocab_size(), ErrorKind::InvalidArgument, "M exceeds vocabulary size");
  auto row = table.scores.row(c);
  std::vector<std::uint32_t> candidates;
  candidates.reserve(row.size());
  if (opts.min_emission_quantile) {
    const double q = *opts.min_emission_quantile;
    require(q >= 0.0 && q <= 1.0, ErrorKind::InvalidArgument, "min-emission quantile must lie in [0, 1]");
    auto em = table.emission.row(c);
    std::vector<double> sorted(em.begin(), em.end());
    std::ranges::sort(sorted);
    const double threshold = sorted[static_cast<std::size_t>(std::floor(q * static_cast<double>(sorted.size() - 1)))];
    for (std::uint32_t w = 0; w < row.size(); ++w)
      if (em[w] >= threshold) candidates.push_back(w);
  } else {
    for (std::uint32_t w = 0; w < row.size(); ++w) candidates.push_back(w);
  }
  const std::size_t m = std::min(opts.top_m, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(m), candidates.end(),
                    [&row](std::uint32_t a, std::uint32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  Explanation ex{static_cast<std::uint32_t>(c), ExplainMethod::MI, {}, std::nullopt};
  for (std::size_t i = 0; i < m; ++i) {
    const auto w = candidates[i];
    const std::uint32_t id = token_ids.empty() ? w : token_ids[w];
    ex.items.push_back({vocab[w], row[w], {id}});
  }
  return ex;
}

struct SpanRecord {
  std::uint32_t doc_id = 0;
  std::vector<std::uint32_t> tokens;      // window token ids, kMaskToken where masked
  Matrix<float> rows;                     // hidden states of the window
  std::vector<double> token_activations;  // relu(h . W_c) per window position
  std::size_t peak_offset = 0;            // position of the peak inside the window
  double activation = 0.0;                // activation at the peak

  bool masked(std::size_t i) const { return tokens[i] == kMaskToken; }
};

struct SpanOptions {
  std::size_t span_len = 10;
  std::size_t top_n = 5;
};

// Window of at most `span_len` positions around `peak`, clipped to [begin, end).
inline std::pair<std::size_t, std::size_t> span_window(std::size_t peak, std::size_t begin, std::size_t end,
                                                       std::size_t span_len) {
  const std::size_t before = (span_len - 1) / 2;
  const std::size_t after = span_len - 1 - before;
  const std::size_t lo = peak >= begin + before ? peak - before : begin;
  const std::size_t hi = std::min(end, peak + after + 1);
  return {lo, hi};
}

// For each document keep the window around its most activating token, then
// return the top_n documents by peak activation (ties: lower doc id). A
// document is a maximal run of rows sharing a doc id inside one shard.
inline std::vector<SpanRecord> topact_explain(const SaeModel& model, const ActivationStore& store, std::size_t c,
                                              const SpanOptions& opts = {}) {
  require(c < model.num_features(), ErrorKind::UnknownFeature, "feature " + std::to_string(c) + " out of range");
  require(opts.span_len >= 1, ErrorKind::InvalidArgument, "span_len must be >= 1");
  require(store.total_rows() == 0 || store.dim() == model.dim(), ErrorKind::DimensionMismatch,
          "store dim does not match model");
  auto wc = model.weights.row(c);

  struct Best {
    double activation;
    std::size_t shard, begin, end, peak;
  };
  std::map<std::uint32_t, Best> best;  // doc id -> best peak
  std::vector<double> acts;
  for (std::size_t s = 0; s < store.shards().size(); ++s) {
    const auto& shard = store.shards()[s];
    acts.resize(shard.n_rows());
    for (std::size_t r = 0; r < shard.n_rows(); ++r) acts[r] = std::max(0.0, dot(shard.data.row(r), wc));
    for (std::size_t begin = 0; begin < shard.n_rows();) {
      std::size_t end = begin;
      while (end < shard.n_rows() && shard.doc_ids[end] == shard.doc_ids[begin]) ++end;
      std::size_t peak = begin;
      for (std::size_t r = begin + 1; r < end; ++r)
        if (acts[r] > acts[peak]) peak = r;
      if (acts[peak] > 0.0) {
        auto [it, inserted] = best.try_emplace(shard.doc_ids[begin], Best{acts[peak], s, begin, end, peak});
        if (!inserted && acts[peak] > it->second.activation) it->second = Best{acts[peak], s, begin, end, peak};
      }
      begin = end;
    }
  }

  std::vector<std::pair<std::uint32_t, Best>> ranked(best.begin(), best.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second.activation > b.second.activation; });
  if (ranked.size() > opts.top_n) ranked.resize(opts.top_n);

  std::vector<SpanRecord> spans;
  for (const auto& [doc, b] : ranked) {
    const auto& shard = store.shards()[b.shard];
    auto [lo, hi] = span_window(b.peak, b.begin, b.end, opts.span_len);
    SpanRecord rec;
    rec.doc_id = doc;
    rec.rows = Matrix<float>(hi - lo, shard.dim());
    for (std::size_t r = lo; r < hi; ++r) {
      rec.tokens.push_back(shard.token_ids[r]);
      std::ranges::copy(shard.data.row(r), rec.rows.row(r - lo).begin());
      rec.token_activations.push_back(std::max(0.0, dot(shard.data.row(r), wc)));
    }
    rec.peak_offset = b.peak - lo;
    rec.activation = b.activation;
    spans.push_back(std::move(rec));
  }
  return spans;
}

// Context-free N2G: a token's contribution is measured by zeroing its hidden
// state and recomputing the span's peak activation. Tokens whose removal
// drops the peak by less than tau * peak are masked. The peak token itself is
// never masked.
inline SpanRecord n2g_refine(const SpanRecord& span, const SaeModel& model, std::size_t c, double tau) {
  require(tau >= 0.0, ErrorKind::InvalidArgument, "tau must be >= 0");
  require(c < model.num_features(), ErrorKind::UnknownFeature, "feature " + std::to_string(c) + " out of range");
  require(span.rows.cols() == model.dim(), ErrorKind::DimensionMismatch, "span rows do not match model dim");
  auto wc = model.weights.row(c);
  const std::size_t len = span.rows.rows();
  std::vector<double> acts(len);
  for (std::size_t i = 0; i < len; ++i) acts[i] = std::max(0.0, dot(span.rows.row(i), wc));
  const double original = len ? *std::ranges::max_element(acts) : 0.0;

  SpanRecord out = span;
  for (std::size_t i = 0; i < len; ++i) {
    if (i == span.peak_offset) continue;
    double without = 0.0;  // a zeroed row activates at relu(0) = 0
    for (std::size_t j = 0; j < len; ++j)
      if (j != i) without = std::max(without, acts[j]);
    const double drop = original - without;
    if (drop < tau * original) out.tokens[i] = kMaskToken;
  }
  return out;
}

inline std::string span_text(const SpanRecord& span, const std::vector<std::string>& vocab) {
  std::string text;
  for (std::size_t i = 0; i < span.tokens.size(); ++i) {
    if (i) text += ' ';
    const auto t = span.tokens[i];
    text += t == kMaskToken ? std::string(kMaskText) : (t < vocab.size() ? vocab[t] : "<" + std::to_string(t) + ">");
  }
  return text;
}

inline Explanation spans_to_explanation(std::uint32_t feature, ExplainMethod method,
                                        const std::vector<SpanRecord>& spans, const std::vector<std::string>& vocab) {
  Explanation ex{feature, method, {}, std::nullopt};
  for (const auto& s : spans) ex.items.push_back({span_text(s, vocab), s.activation, s.tokens});
  return ex;
}

inline const std::vector<std::string>& default_special_tokens() {
  static const std::vector<std::string> tokens = {"<s>",   "</s>",  "<pad>", "<unk>", "<bos>",
                                                  "<eos>", "<mask>", "[CLS]", "[SEP]", "[PAD]"};
  return tokens;
}

struct Vocabulary {
  std::vector<std::uint32_t> ids;  // ascending
  std::vector<std::string> tokens;
};

// Tokens seen at least min_count times, ascending id, minus special tokens.
inline Vocabulary build_vocab(const ActivationStore& store, const std::vector<std::string>& token_strings,
                              std::size_t min_count,
                              const std::vector<std::string>& exclude = default_special_tokens()) {
  std::unordered_map<std::uint32_t, std::size_t> counts;
  for (const auto& shard : store.shards())
    for (auto id : shard.token_ids) ++counts[id];
  const std::set<std::string> excluded(exclude.begin(), exclude.end());
  Vocabulary v;
  for (const auto& [id, n] : counts) {
    if (n < min_count) continue;
    require(id < token_strings.size(), ErrorKind::IndexOutOfRange,
            "token id " + std::to_string(id) + " has no entry in the token table");
    if (excluded.count(token_strings[id])) continue;
    v.ids.push_back(id);
  }
  std::ranges::sort(v.ids);
  require(!v.ids.empty(), ErrorKind::EmptyResult, "vocabulary is empty after filtering");
  for (auto id : v.ids) v.tokens.push_back(token_strings[id]);
  return v;
}

inline nlohmann::json to_json_line(const Explanation& ex) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : ex.items) items.push_back({{"text", it.text}, {"score", it.score}});
  return {{"feature_id", ex.feature_id},
          {"method", to_string(ex.method)},
          {"items", items},
          {"summary", ex.summary ? nlohmann::json(*ex.summary) : nlohmann::json(nullptr)}};
}

inline void write_explanations(const std::vector<Explanation>& exs, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  for (const auto& ex : exs) out << to_json_line(ex).dump() << '\n';
}

inline std::vector<Explanation> read_explanations(const fs::path& path) {
  std::vector<Explanation> out;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Explanation ex;
      ex.feature_id = j.at("feature_id").get<std::uint32_t>();
      ex.method = parse_method(j.at("method").get<std::string>());
      for (const auto& it : j.at("items")) ex.items.push_back({it.at("text"), it.at("score"), {}});
      if (j.contains("summary") && !j["summary"].is_null()) ex.summary = j["summary"].get<std::string>();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::SchemaMismatch, std::string("bad explanation line: ") + e.what());
    }
  }
  return out;
}

}  // namespace saex
