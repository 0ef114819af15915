#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saex/activation_store.hpp"
#include "saex/adam.hpp"
#include "saex/parallel.hpp"
#include "saex/sae.hpp"

namespace saex {

struct TrainConfig {
  std::size_t num_features = 512;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 6.25e-10;
  std::size_t epochs = 5;
  std::size_t batch_size = 8192;
  std::size_t k_init = 200;
  std::size_t k_final = 20;
  double k_anneal_fraction = 0.5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    require(num_features >= 1, ErrorKind::InvalidArgument, "num_features must be >= 1");
    require(lr >= 0.0 && std::isfinite(lr), ErrorKind::InvalidArgument, "lr must be finite and >= 0");
    require(k_final >= 1 && k_final <= k_init, ErrorKind::InvalidArgument, "need 0 < k_final <= k_init");
    require(k_final <= num_features, ErrorKind::InvalidArgument, "k_final cannot exceed num_features");
    require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
    require(k_anneal_fraction >= 0.0, ErrorKind::InvalidArgument, "k_anneal_fraction must be >= 0");
    require(threads >= 1, ErrorKind::InvalidArgument, "threads must be >= 1");
  }

  AdamConfig adam() const { return {lr, adam_beta1, adam_beta2, adam_eps}; }

  std::size_t k_at(std::uint64_t tokens_seen, std::uint64_t tokens_per_epoch) const {
    return std::min(num_features,
                    sparsity_schedule(tokens_seen, tokens_per_epoch, k_init, k_final, k_anneal_fraction));
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"num_features", c.num_features}, {"lr", c.lr},           {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},     {"adam_eps", c.adam_eps}, {"epochs", c.epochs},
       {"batch_size", c.batch_size},     {"k_init", c.k_init},   {"k_final", c.k_final},
       {"k_anneal_fraction", c.k_anneal_fraction}, {"seed", c.seed}, {"threads", c.threads}};
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  std::size_t k_end = 0;
  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct TrainReport {
  double initial_valid_loss = 0.0;
  std::vector<EpochStats> epochs;
  std::size_t dead_features = 0;
  std::size_t final_k = 0;
  std::uint64_t steps = 0;
  double wall_seconds = 0.0;
  TrainConfig config;

  double final_valid_loss() const { return epochs.empty() ? initial_valid_loss : epochs.back().valid_loss; }

  // Wall time is excluded: two runs with the same seed compare equal.
  bool same_outcome(const TrainReport& o) const {
    return initial_valid_loss == o.initial_valid_loss && epochs == o.epochs && dead_features == o.dead_features &&
           final_k == o.final_k && steps == o.steps;
  }
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_loss", e.valid_loss}, {"k", e.k_end}});
  j = {{"initial_valid_loss", r.initial_valid_loss},
       {"epochs", epochs},
       {"dead_features", r.dead_features},
       {"final_k", r.final_k},
       {"steps", r.steps},
       {"wall_seconds", r.wall_seconds},
       {"config", r.config}};
}

struct TrainResult {
  SaeModel model;
  TrainReport report;
};

namespace detail {

inline Matrix<float> gather_rows(const ActivationStore& store) {
  Matrix<float> x(store.total_rows(), store.dim());
  std::size_t n = 0;
  for (const auto& s : store.shards())
    for (std::size_t r = 0; r < s.n_rows(); ++r, ++n) std::ranges::copy(s.data.row(r), x.row(n).begin());
  return x;
}

}  // namespace detail

inline double validation_loss(const SaeModel& model, const Matrix<float>& x, std::size_t k) {
  if (x.rows() == 0) return 0.0;
  return reconstruction_loss(x, decode(encode(x, model, k), model));
}

// Adam over shuffled row batches. The Top-K support is recomputed every
// forward pass and the gradient is exact for that support. Validation loss is
// always measured at k_final. Bit-reproducible for a fixed (seed, threads).
inline TrainResult train(const ActivationStore& train_rows, const ActivationStore& valid_rows,
                         const TrainConfig& cfg) {
  cfg.validate();
  require(train_rows.total_rows() > 0, ErrorKind::EmptyResult, "training store is empty");
  require(valid_rows.total_rows() == 0 || valid_rows.dim() == train_rows.dim(), ErrorKind::DimensionMismatch,
          "validation rows have a different dim from training rows");
  const auto start = std::chrono::steady_clock::now();

  const std::size_t dim = train_rows.dim();
  const std::size_t c = cfg.num_features;
  const std::uint64_t n_train = train_rows.total_rows();
  const Matrix<float> x = detail::gather_rows(train_rows);
  const Matrix<float> valid = detail::gather_rows(valid_rows);

  SaeModel model = init_model<float>(c, dim, cfg.seed);
  model.k = cfg.k_final;
  AdamState adam(c * dim);
  const AdamConfig adam_cfg = cfg.adam();

  TrainReport report;
  report.config = cfg;
  report.initial_valid_loss = validation_loss(model, valid, cfg.k_final);

  const std::size_t max_chunks = chunk_count(cfg.batch_size, cfg.threads);
  std::vector<Matrix<double>> grads(max_chunks, Matrix<double>(c, dim));
  std::vector<double> chunk_loss(max_chunks);
  Matrix<double> grad(c, dim);

  std::uint64_t tokens_seen = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const BatchPlan plan = plan_batches(n_train, cfg.batch_size, derive_seed(cfg.seed, {epoch}));
    double epoch_loss = 0.0;
    std::size_t k = cfg.k_at(tokens_seen, n_train);
    for (std::size_t b = 0; b < plan.num_batches(); ++b) {
      const auto rows = plan.batch(b);
      k = cfg.k_at(tokens_seen, n_train);
      const double scale = 1.0 / static_cast<double>(rows.size());
      const std::size_t chunks = chunk_count(rows.size(), cfg.threads);
      parallel_chunks(rows.size(), cfg.threads, [&](std::size_t t, std::size_t begin, std::size_t end) {
        auto& g = grads[t];
        std::ranges::fill(g.flat(), 0.0);
        std::vector<float> z;
        std::vector<std::uint32_t> idx;
        SparseRow<float> acts;
        std::vector<std::uint32_t> support;
        std::vector<double> scratch;
        double loss = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
          auto xr = x.row(rows[i]);
          encode_row(model, xr, k, z, idx, acts);
          support.clear();
          for (const auto& a : acts) support.push_back(a.feature);
          loss += accumulate_row_gradient(model.weights, xr, std::span<const std::uint32_t>(support), scale,
                                          g.flat(), scratch);
        }
        chunk_loss[t] = loss;
      });
      double batch_loss = 0.0;
      std::ranges::copy(grads[0].flat(), grad.flat().begin());
      batch_loss += chunk_loss[0];
      for (std::size_t t = 1; t < chunks; ++t) {
        auto src = grads[t].flat();
        auto dst = grad.flat();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        batch_loss += chunk_loss[t];
      }
      if (!std::isfinite(batch_loss))
        fail(ErrorKind::NonFiniteLoss, "non-finite training loss at step " + std::to_string(adam.t + 1));
      adam_step(model.weights.flat(), std::span<const double>(grad.flat()), adam, adam_cfg);
      // A NaN pre-activation is gated to zero by the ReLU, so overflowed
      // weights would otherwise go unnoticed by the loss.
      if (!all_finite(model.weights.flat()))
        fail(ErrorKind::NonFiniteLoss, "weights diverged at step " + std::to_string(adam.t));
      epoch_loss += batch_loss * static_cast<double>(rows.size());
      tokens_seen += rows.size();
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.train_loss = epoch_loss / static_cast<double>(n_train);
    stats.valid_loss = validation_loss(model, valid, cfg.k_final);
    stats.k_end = k;
    if (!std::isfinite(stats.valid_loss))
      fail(ErrorKind::NonFiniteLoss, "non-finite validation loss after epoch " + std::to_string(epoch + 1));
    report.epochs.push_back(stats);
  }

  model.steps_trained = adam.t;
  report.steps = adam.t;
  report.final_k = cfg.k_final;
  report.dead_features = count_dead_features(model, valid.rows() ? valid : x, cfg.k_final);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(report)};
}

}  // namespace saex
