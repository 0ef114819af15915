#pragma once

// Top-K sparse autoencoder with tied weights and no biases:
//   a = relu(topk(x W^T)),  x_hat = a W,  W is C x D.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "saex/activation_store.hpp"
#include "saex/error.hpp"
#include "saex/matrix.hpp"
#include "saex/random.hpp"

namespace saex {

template <typename T>
struct BasicSaeModel {
  Matrix<T> weights;  // row c is the feature direction W_c
  std::size_t k = 1;
  std::uint64_t seed = 0;
  std::uint64_t steps_trained = 0;

  std::size_t num_features() const noexcept { return weights.rows(); }
  std::size_t dim() const noexcept { return weights.cols(); }

  void validate() const {
    require(num_features() >= 1 && dim() >= 1, ErrorKind::InvalidArgument, "model needs C >= 1 and D >= 1");
    require(k >= 1 && k <= num_features(), ErrorKind::InvalidArgument, "model needs 1 <= K <= C");
    require(all_finite(weights.flat()), ErrorKind::NonFinite, "model weights contain NaN or Inf");
  }

  template <typename U>
  BasicSaeModel<U> cast() const {
    return {weights.template cast<U>(), k, seed, steps_trained};
  }

  friend bool operator==(const BasicSaeModel&, const BasicSaeModel&) = default;
};

using SaeModel = BasicSaeModel<float>;

template <typename T>
struct FeatureActivation {
  std::uint32_t feature;
  T value;
  friend bool operator==(const FeatureActivation&, const FeatureActivation&) = default;
};

// One token's activations: at most K entries, indices ascending, values > 0.
template <typename T>
using SparseRow = std::vector<FeatureActivation<T>>;

template <typename T>
using SparseActivations = std::vector<SparseRow<T>>;

// Kaiming-normal initialisation: W_ij ~ N(0, 2/D).
template <typename T = float>
BasicSaeModel<T> init_model(std::size_t num_features, std::size_t dim, std::uint64_t seed) {
  require(num_features >= 1 && dim >= 1, ErrorKind::InvalidArgument, "init_model needs C >= 1 and D >= 1");
  BasicSaeModel<T> model{Matrix<T>(num_features, dim), 1, seed, 0};
  Rng rng(mix_seed(seed));
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(dim)));
  for (T& w : model.weights.flat()) w = static_cast<T>(normal(rng));
  return model;
}

// Indices of the k largest entries of z, ascending. Ties go to the lower index.
template <typename T>
void select_topk(std::span<const T> z, std::size_t k, std::vector<std::uint32_t>& out) {
  k = std::min(k, z.size());
  out.resize(z.size());
  std::iota(out.begin(), out.end(), std::uint32_t{0});
  auto before = [&z](std::uint32_t a, std::uint32_t b) { return z[a] > z[b] || (z[a] == z[b] && a < b); };
  if (k < z.size()) std::nth_element(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k), out.end(), before);
  out.resize(k);
  std::sort(out.begin(), out.end());
}

template <typename T>
SparseRow<T> topk_activate(std::span<const T> z, std::size_t k) {
  std::vector<std::uint32_t> idx;
  select_topk(z, k, idx);
  SparseRow<T> row;
  row.reserve(idx.size());
  for (auto c : idx)
    if (z[c] > T{0}) row.push_back({c, z[c]});
  return row;
}

namespace detail {

template <typename T, typename X>
void preactivations(const Matrix<T>& w, std::span<const X> x, std::vector<T>& z) {
  z.resize(w.rows());
  for (std::size_t c = 0; c < w.rows(); ++c) z[c] = static_cast<T>(dot(w.row(c), x));
}

}  // namespace detail

// Encoder for a single row, reusing caller buffers.
template <typename T, typename X>
void encode_row(const BasicSaeModel<T>& model, std::span<const X> x, std::size_t k, std::vector<T>& z,
                std::vector<std::uint32_t>& idx, SparseRow<T>& out) {
  detail::preactivations(model.weights, x, z);
  select_topk(std::span<const T>(z), k, idx);
  out.clear();
  for (auto c : idx)
    if (z[c] > T{0}) out.push_back({c, z[c]});
}

template <typename T, typename X>
SparseActivations<T> encode(const Matrix<X>& x, const BasicSaeModel<T>& model, std::size_t k) {
  require(x.cols() == model.dim(), ErrorKind::DimensionMismatch,
          "encode: input has " + std::to_string(x.cols()) + " columns, model D = " + std::to_string(model.dim()));
  SparseActivations<T> acts(x.rows());
  std::vector<T> z;
  std::vector<std::uint32_t> idx;
  for (std::size_t n = 0; n < x.rows(); ++n) encode_row(model, x.row(n), k, z, idx, acts[n]);
  return acts;
}

template <typename T, typename X>
SparseActivations<T> encode(const Matrix<X>& x, const BasicSaeModel<T>& model) {
  return encode(x, model, model.k);
}

template <typename T>
void decode_row(const SparseRow<T>& acts, const Matrix<T>& w, std::span<double> out) {
  std::ranges::fill(out, 0.0);
  for (const auto& [c, a] : acts) {
    require(c < w.rows(), ErrorKind::IndexOutOfRange, "decode: feature index " + std::to_string(c) + " >= C");
    auto wc = w.row(c);
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += static_cast<double>(a) * static_cast<double>(wc[d]);
  }
}

template <typename T>
Matrix<T> decode(const SparseActivations<T>& acts, const BasicSaeModel<T>& model) {
  Matrix<T> out(acts.size(), model.dim());
  std::vector<double> buf(model.dim());
  for (std::size_t n = 0; n < acts.size(); ++n) {
    decode_row(acts[n], model.weights, std::span<double>(buf));
    std::ranges::transform(buf, out.row(n).begin(), [](double v) { return static_cast<T>(v); });
  }
  return out;
}

// Mean over rows of the squared Euclidean row distance.
template <typename A, typename B>
double reconstruction_loss(const Matrix<A>& x, const Matrix<B>& x_hat) {
  require(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(), ErrorKind::DimensionMismatch,
          "reconstruction_loss: shape mismatch");
  if (x.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    double row = 0.0;
    for (std::size_t d = 0; d < x.cols(); ++d) {
      const double diff = static_cast<double>(x(n, d)) - static_cast<double>(x_hat(n, d));
      row += diff * diff;
    }
    total += row;
  }
  return total / static_cast<double>(x.rows());
}

// Loss/gradient with the active support held fixed. With a_c = W_c . x for
// c in the support and residual r = sum_c a_c W_c - x, the per-row loss is
// |r|^2 and its gradient w.r.t. W_c is 2 (a_c r + (r . W_c) x).
// `scale` multiplies both (1/N for the mean).
template <typename T, typename X>
double accumulate_row_gradient(const Matrix<T>& w, std::span<const X> x, std::span<const std::uint32_t> support,
                               double scale, std::span<double> grad, std::vector<double>& scratch) {
  const std::size_t dim = w.cols();
  scratch.assign(2 * dim + support.size(), 0.0);
  std::span<double> r(scratch.data(), dim);
  std::span<double> act(scratch.data() + dim, support.size());
  for (std::size_t i = 0; i < support.size(); ++i) {
    auto wc = w.row(support[i]);
    act[i] = dot(wc, x);
    for (std::size_t d = 0; d < dim; ++d) r[d] += act[i] * static_cast<double>(wc[d]);
  }
  double loss = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    r[d] -= static_cast<double>(x[d]);
    loss += r[d] * r[d];
  }
  if (!grad.empty()) {
    for (std::size_t i = 0; i < support.size(); ++i) {
      auto wc = w.row(support[i]);
      const double r_dot_w = dot(std::span<const double>(r), wc);
      double* g = grad.data() + static_cast<std::size_t>(support[i]) * dim;
      for (std::size_t d = 0; d < dim; ++d)
        g[d] += 2.0 * scale * (act[i] * r[d] + r_dot_w * static_cast<double>(x[d]));
    }
  }
  return scale * loss;
}

template <typename T, typename X>
double loss_with_support(const Matrix<T>& w, const Matrix<X>& x,
                         const std::vector<std::vector<std::uint32_t>>& supports) {
  require(supports.size() == x.rows(), ErrorKind::DimensionMismatch, "one support per row required");
  std::vector<double> scratch;
  double loss = 0.0;
  const double scale = x.rows() ? 1.0 / static_cast<double>(x.rows()) : 0.0;
  for (std::size_t n = 0; n < x.rows(); ++n)
    loss += accumulate_row_gradient(w, x.row(n), std::span<const std::uint32_t>(supports[n]), scale, {}, scratch);
  return loss;
}

template <typename T, typename X>
Matrix<double> gradient_with_support(const Matrix<T>& w, const Matrix<X>& x,
                                     const std::vector<std::vector<std::uint32_t>>& supports) {
  require(supports.size() == x.rows(), ErrorKind::DimensionMismatch, "one support per row required");
  Matrix<double> grad(w.rows(), w.cols());
  std::vector<double> scratch;
  const double scale = x.rows() ? 1.0 / static_cast<double>(x.rows()) : 0.0;
  for (std::size_t n = 0; n < x.rows(); ++n)
    accumulate_row_gradient(w, x.row(n), std::span<const std::uint32_t>(supports[n]), scale, grad.flat(), scratch);
  return grad;
}

// Feature indices with strictly positive activation, i.e. the support that
// carries gradient.
template <typename T>
std::vector<std::vector<std::uint32_t>> supports_of(const SparseActivations<T>& acts) {
  std::vector<std::vector<std::uint32_t>> out(acts.size());
  for (std::size_t n = 0; n < acts.size(); ++n)
    for (const auto& a : acts[n]) out[n].push_back(a.feature);
  return out;
}

// Linear anneal from k_init to k_final over the first `anneal_fraction` of
// the first epoch, rounded to nearest; k_final afterwards.
inline std::size_t sparsity_schedule(std::uint64_t tokens_seen, std::uint64_t tokens_first_epoch, std::size_t k_init,
                                     std::size_t k_final, double anneal_fraction) {
  const double horizon = anneal_fraction * static_cast<double>(tokens_first_epoch);
  if (horizon <= 0.0 || static_cast<double>(tokens_seen) >= horizon) return k_final;
  const double t = static_cast<double>(tokens_seen) / horizon;
  const double k = static_cast<double>(k_init) + (static_cast<double>(k_final) - static_cast<double>(k_init)) * t;
  return static_cast<std::size_t>(std::llround(k));
}

// Z^gamma rounded to the nearest power of two (nearest in log2).
inline std::uint64_t recommend_feature_count(double train_tokens, double gamma) {
  require(train_tokens >= 1.0, ErrorKind::InvalidArgument, "train_tokens must be >= 1");
  require(gamma > 0.0 && gamma < 1.0, ErrorKind::InvalidArgument, "gamma must lie in (0, 1)");
  const double log2_raw = gamma * std::log2(train_tokens);
  return std::uint64_t{1} << static_cast<unsigned>(std::llround(log2_raw));
}

// Features whose activation is never positive over `x` at sparsity k.
template <typename T, typename X>
std::size_t count_dead_features(const BasicSaeModel<T>& model, const Matrix<X>& x, std::size_t k) {
  std::vector<char> alive(model.num_features(), 0);
  for (const auto& row : encode(x, model, k))
    for (const auto& a : row) alive[a.feature] = 1;
  return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), 0));
}

// "SAEM" model container: magic | u32 version=1 | u32 C | u32 D | u32 K
// | u64 seed | u64 steps | f32 W[C*D] little-endian row-major.
inline void write_model(const SaeModel& model, const fs::path& path) {
  model.validate();
  detail::ByteWriter w;
  w.bytes("SAEM", 4);
  w.le<std::uint32_t>(1);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.num_features()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.dim()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.k));
  w.le<std::uint64_t>(model.seed);
  w.le<std::uint64_t>(model.steps_trained);
  for (float v : model.weights.flat()) w.f32(v);
  w.flush_to(path);
}

inline SaeModel read_model(const fs::path& path) {
  detail::ByteReader r(detail::slurp(path));
  char magic[4] = {};
  r.bytes(magic, 4, ErrorKind::BadMagic);
  require(std::memcmp(magic, "SAEM", 4) == 0, ErrorKind::BadMagic, "not an SAEM model file");
  auto version = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  require(version == 1, ErrorKind::UnsupportedVersion, "model version " + std::to_string(version) + " unsupported");
  const auto c = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  const auto d = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  SaeModel model;
  model.k = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  model.seed = r.le<std::uint64_t>(ErrorKind::TruncatedPayload);
  model.steps_trained = r.le<std::uint64_t>(ErrorKind::TruncatedPayload);
  detail::check_body_size(r.remaining(), c, 4ull * d);
  model.weights = Matrix<float>(c, d);
  for (float& v : model.weights.flat()) v = r.f32();
  model.validate();
  return model;
}

}  // namespace saex
