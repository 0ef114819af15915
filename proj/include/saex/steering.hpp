#pragma once

// Runtime steering with a subset S (s x D) of dictionary rows:
//   amplify:   X' = X + alpha * relu(X S^T) S
//   calibrate: X' = X - relu(X S^T) S + beta * mean_rows(S)

#include <algorithm>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "saex/activation_store.hpp"
#include "saex/error.hpp"
#include "saex/matrix.hpp"
#include "saex/sae.hpp"

namespace saex {

struct FeatureSubset {
  Matrix<float> rows;  // copies of the selected model rows, in feature_ids order
  std::vector<std::uint32_t> feature_ids;
  std::string label;

  std::size_t size() const noexcept { return rows.rows(); }
};

struct FeatureLabel {
  std::uint32_t feature_id = 0;
  std::string label;
};

inline std::vector<FeatureLabel> read_labels(const fs::path& path) {
  std::vector<FeatureLabel> labels;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      labels.push_back({j.at("feature_id").get<std::uint32_t>(), j.at("label").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::SchemaMismatch, std::string("bad label line: ") + e.what());
    }
  }
  return labels;
}

inline FeatureSubset select_features(const std::vector<FeatureLabel>& labels, const SaeModel& model,
                                     const std::string& query) {
  std::vector<std::uint32_t> ids;
  for (const auto& l : labels) {
    require(l.feature_id < model.num_features(), ErrorKind::UnknownFeature,
            "label refers to feature " + std::to_string(l.feature_id) + " but the model has " +
                std::to_string(model.num_features()));
    if (l.label == query) ids.push_back(l.feature_id);
  }
  std::ranges::sort(ids);
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  require(!ids.empty(), ErrorKind::EmptySelection, "no feature carries label '" + query + "'");
  FeatureSubset subset{Matrix<float>(ids.size(), model.dim()), ids, query};
  for (std::size_t i = 0; i < ids.size(); ++i) std::ranges::copy(model.weights.row(ids[i]), subset.rows.row(i).begin());
  return subset;
}

namespace detail {

template <typename X, typename S>
void check_steer_dims(const Matrix<X>& x, const Matrix<S>& s) {
  require(s.rows() >= 1, ErrorKind::EmptySelection, "steering subset is empty");
  require(x.cols() == s.cols(), ErrorKind::DimensionMismatch,
          "activations have dim " + std::to_string(x.cols()) + " but subset has dim " + std::to_string(s.cols()));
}

// relu(x S^T) S for one row; returns false when every gate is closed.
template <typename X, typename S>
bool gated_projection(std::span<const X> x, const Matrix<S>& s, std::vector<double>& out) {
  out.assign(s.cols(), 0.0);
  bool any = false;
  for (std::size_t j = 0; j < s.rows(); ++j) {
    const double a = dot(x, s.row(j));
    if (a <= 0.0) continue;
    any = true;
    auto sj = s.row(j);
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += a * static_cast<double>(sj[d]);
  }
  return any;
}

}  // namespace detail

template <typename X, typename S>
Matrix<X> amplify(const Matrix<X>& x, const Matrix<S>& s, double alpha) {
  detail::check_steer_dims(x, s);
  Matrix<X> out = x;
  if (alpha == 0.0) return out;
  std::vector<double> proj;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    if (!detail::gated_projection(x.row(n), s, proj)) continue;
    auto row = out.row(n);
    for (std::size_t d = 0; d < row.size(); ++d)
      row[d] = static_cast<X>(static_cast<double>(row[d]) + alpha * proj[d]);
  }
  return out;
}

template <typename S>
std::vector<double> subset_mean(const Matrix<S>& s) {
  std::vector<double> mean(s.cols(), 0.0);
  for (std::size_t j = 0; j < s.rows(); ++j)
    for (std::size_t d = 0; d < s.cols(); ++d) mean[d] += static_cast<double>(s(j, d));
  for (double& m : mean) m /= static_cast<double>(s.rows());
  return mean;
}

template <typename X, typename S>
Matrix<X> calibrate(const Matrix<X>& x, const Matrix<S>& s, double beta) {
  detail::check_steer_dims(x, s);
  const std::vector<double> mean = subset_mean(s);
  Matrix<X> out(x.rows(), x.cols());
  std::vector<double> proj;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    detail::gated_projection(x.row(n), s, proj);
    auto src = x.row(n);
    auto dst = out.row(n);
    for (std::size_t d = 0; d < dst.size(); ++d) {
      const double base = static_cast<double>(src[d]) - proj[d];
      dst[d] = static_cast<X>(base + beta * mean[d]);
    }
  }
  return out;
}

struct Amplify {
  double alpha = -1.0;
};
struct Calibrate {
  double beta = 2.5;
};
using SteerStep = std::variant<Amplify, Calibrate>;

// A single transform or a composite applied left to right.
struct SteerMode {
  std::vector<SteerStep> steps;

  static SteerMode amplify(double alpha) { return {{Amplify{alpha}}}; }
  static SteerMode calibrate(double beta) { return {{Calibrate{beta}}}; }
};

template <typename X, typename S>
Matrix<X> apply_steering(const Matrix<X>& x, const Matrix<S>& s, const SteerMode& mode) {
  require(!mode.steps.empty(), ErrorKind::InvalidArgument, "steering mode has no steps");
  Matrix<X> out = x;
  for (const auto& step : mode.steps) {
    out = std::visit(
        [&](const auto& st) {
          if constexpr (std::is_same_v<std::decay_t<decltype(st)>, Amplify>)
            return amplify(out, s, st.alpha);
          else
            return calibrate(out, s, st.beta);
        },
        step);
  }
  return out;
}

inline ActivationShard steer_shard(const ActivationShard& in, const FeatureSubset& subset, const SteerMode& mode) {
  ActivationShard out = in;
  out.data = apply_steering(in.data, subset.rows, mode);
  return out;
}

// Steers every shard listed in `manifest_in`, writing same-named shards and a
// manifest ("steered.manifest") into out_dir. Returns the written paths.
inline std::vector<fs::path> steer_stream(const fs::path& manifest_in, const FeatureSubset& subset,
                                          const SteerMode& mode, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& in_path : read_manifest(manifest_in)) {
    const ActivationShard shard = read_shard(in_path);
    require(shard.dim() == subset.rows.cols(), ErrorKind::DimensionMismatch,
            "shard '" + in_path.string() + "' has dim " + std::to_string(shard.dim()));
    const fs::path out_path = out_dir / in_path.filename();
    require(fs::weakly_canonical(out_path) != fs::weakly_canonical(in_path), ErrorKind::InvalidArgument,
            "refusing to overwrite input shard '" + in_path.string() + "'");
    write_shard(steer_shard(shard, subset, mode), out_path);
    written.push_back(out_path);
  }
  std::vector<fs::path> relative;
  for (const auto& p : written) relative.push_back(p.filename());
  write_manifest(relative, out_dir / "steered.manifest");
  return written;
}

}  // namespace saex
