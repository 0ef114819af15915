#pragma once

// Binary persistence for activation matrices ("SAES" container), output
// embeddings with their vocabulary, shard manifests, and the shuffled batch
// plan used by training.
//
// Container layout (all integers and floats little-endian):
//   "SAES" | u32 version=1 | u8 dtype=0 (f32) | u64 n_rows | u32 dim
//   | u16 tag_len | tag bytes (UTF-8)
//   | f32 payload[n_rows * dim] (row-major)
//   | u32 token_ids[n_rows] | u32 doc_ids[n_rows]      (shards only)
// Embedding and score-table containers omit the two id sections.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "saex/error.hpp"
#include "saex/matrix.hpp"
#include "saex/random.hpp"

namespace saex {

namespace fs = std::filesystem;

struct ActivationShard {
  Matrix<float> data;  // n_rows x dim
  std::vector<std::uint32_t> token_ids;
  std::vector<std::uint32_t> doc_ids;
  std::string layer_tag;

  std::size_t n_rows() const noexcept { return data.rows(); }
  std::size_t dim() const noexcept { return data.cols(); }

  void validate() const {
    require(token_ids.size() == n_rows() && doc_ids.size() == n_rows(), ErrorKind::DimensionMismatch,
            "token_ids/doc_ids must have one entry per row");
    require(all_finite(data.flat()), ErrorKind::NonFinite, "shard contains NaN or Inf");
  }

  friend bool operator==(const ActivationShard&, const ActivationShard&) = default;
};

struct EmbeddingMatrix {
  Matrix<float> data;  // vocab_size x dim
  std::vector<std::string> vocab;

  std::size_t vocab_size() const noexcept { return data.rows(); }
  std::size_t dim() const noexcept { return data.cols(); }

  void validate() const {
    require(vocab.size() == data.rows(), ErrorKind::CountMismatch,
            "vocab has " + std::to_string(vocab.size()) + " tokens but matrix has " +
                std::to_string(data.rows()) + " rows");
    std::unordered_set<std::string> seen;
    for (const auto& tok : vocab)
      require(seen.insert(tok).second, ErrorKind::DuplicateToken, "duplicate vocab token '" + tok + "'");
    require(all_finite(data.flat()), ErrorKind::NonFinite, "embedding matrix contains NaN or Inf");
  }

  // Rows restricted to `ids` (in the given order).
  EmbeddingMatrix subset(std::span<const std::uint32_t> ids) const {
    EmbeddingMatrix out{Matrix<float>(ids.size(), dim()), {}};
    out.vocab.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] < vocab_size(), ErrorKind::IndexOutOfRange, "token id outside embedding table");
      std::ranges::copy(data.row(ids[i]), out.data.row(i).begin());
      out.vocab.push_back(vocab[ids[i]]);
    }
    return out;
  }
};

namespace detail {

inline constexpr char kShardMagic[4] = {'S', 'A', 'E', 'S'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void le(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }

  void flush_to(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    require(static_cast<bool>(out), ErrorKind::Io, "write failed for '" + path.string() + "'");
  }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}

  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  void bytes(void* p, std::size_t n, ErrorKind on_short) {
    require(remaining() >= n, on_short, "unexpected end of file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U le(ErrorKind on_short) {
    require(remaining() >= sizeof(U), on_short, "unexpected end of file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>(ErrorKind::TruncatedPayload)); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ContainerHeader {
  std::uint64_t n_rows = 0;
  std::uint32_t dim = 0;
  std::string tag;
};

inline void write_header(ByteWriter& w, std::uint64_t n_rows, std::uint32_t dim, const std::string& tag) {
  require(tag.size() <= 0xFFFF, ErrorKind::InvalidArgument, "layer tag longer than 65535 bytes");
  w.bytes(kShardMagic, 4);
  w.le<std::uint32_t>(kShardVersion);
  w.le<std::uint8_t>(kDtypeF32);
  w.le<std::uint64_t>(n_rows);
  w.le<std::uint32_t>(dim);
  w.le<std::uint16_t>(static_cast<std::uint16_t>(tag.size()));
  w.bytes(tag.data(), tag.size());
}

inline ContainerHeader read_header(ByteReader& r) {
  char magic[4] = {};
  r.bytes(magic, 4, ErrorKind::BadMagic);
  require(std::memcmp(magic, kShardMagic, 4) == 0, ErrorKind::BadMagic, "not an SAES container");
  auto version = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  require(version == kShardVersion, ErrorKind::UnsupportedVersion,
          "container version " + std::to_string(version) + " is not supported");
  auto dtype = r.le<std::uint8_t>(ErrorKind::TruncatedPayload);
  require(dtype == kDtypeF32, ErrorKind::UnsupportedDtype, "only dtype 0 (f32) is supported");
  ContainerHeader h;
  h.n_rows = r.le<std::uint64_t>(ErrorKind::TruncatedPayload);
  h.dim = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  auto tag_len = r.le<std::uint16_t>(ErrorKind::TruncatedPayload);
  h.tag.resize(tag_len);
  r.bytes(h.tag.data(), tag_len, ErrorKind::TruncatedPayload);
  return h;
}

// A body that holds a whole number of fewer (or more) records than the header
// promises is a consistent file with the wrong row count; anything else is a
// cut-off write.
inline void check_body_size(std::size_t remaining, std::uint64_t n_rows, std::size_t record_bytes) {
  const std::uint64_t expected = n_rows * record_bytes;
  if (remaining == expected) return;
  if (record_bytes > 0 && remaining % record_bytes == 0)
    fail(ErrorKind::DimensionMismatch, "header declares " + std::to_string(n_rows) + " rows but body holds " +
                                           std::to_string(remaining / record_bytes));
  fail(ErrorKind::TruncatedPayload, "body has " + std::to_string(remaining) + " bytes, expected " +
                                        std::to_string(expected));
}

inline Matrix<float> read_payload(ByteReader& r, const ContainerHeader& h) {
  Matrix<float> m(static_cast<std::size_t>(h.n_rows), h.dim);
  for (float& v : m.flat()) v = r.f32();
  require(all_finite(m.flat()), ErrorKind::NonFinite, "payload contains NaN or Inf");
  return m;
}

}  // namespace detail

inline void write_shard(const ActivationShard& shard, const fs::path& path) {
  shard.validate();
  detail::ByteWriter w;
  detail::write_header(w, shard.n_rows(), static_cast<std::uint32_t>(shard.dim()), shard.layer_tag);
  for (float v : shard.data.flat()) w.f32(v);
  for (auto id : shard.token_ids) w.le<std::uint32_t>(id);
  for (auto id : shard.doc_ids) w.le<std::uint32_t>(id);
  w.flush_to(path);
}

inline ActivationShard read_shard(const fs::path& path) {
  detail::ByteReader r(detail::slurp(path));
  auto h = detail::read_header(r);
  detail::check_body_size(r.remaining(), h.n_rows, 4ull * h.dim + 8ull);
  ActivationShard s;
  s.layer_tag = h.tag;
  s.data = detail::read_payload(r, h);
  s.token_ids.resize(h.n_rows);
  s.doc_ids.resize(h.n_rows);
  for (auto& id : s.token_ids) id = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  for (auto& id : s.doc_ids) id = r.le<std::uint32_t>(ErrorKind::TruncatedPayload);
  return s;
}

// Id-less container, used for embedding tables and score-table dumps.
inline void write_matrix(const Matrix<float>& m, const std::string& tag, const fs::path& path) {
  require(all_finite(m.flat()), ErrorKind::NonFinite, "matrix contains NaN or Inf");
  detail::ByteWriter w;
  detail::write_header(w, m.rows(), static_cast<std::uint32_t>(m.cols()), tag);
  for (float v : m.flat()) w.f32(v);
  w.flush_to(path);
}

inline Matrix<float> read_matrix(const fs::path& path, std::string* tag = nullptr) {
  detail::ByteReader r(detail::slurp(path));
  auto h = detail::read_header(r);
  detail::check_body_size(r.remaining(), h.n_rows, 4ull * h.dim);
  if (tag) *tag = h.tag;
  return detail::read_payload(r, h);
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::vector<std::string>& lines, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  for (const auto& l : lines) out << l << '\n';
}

inline EmbeddingMatrix load_embeddings(const fs::path& matrix_path, const fs::path& vocab_path) {
  EmbeddingMatrix emb{read_matrix(matrix_path), read_lines(vocab_path)};
  emb.validate();
  return emb;
}

inline void save_embeddings(const EmbeddingMatrix& emb, const fs::path& matrix_path, const fs::path& vocab_path) {
  emb.validate();
  write_matrix(emb.data, "embeddings", matrix_path);
  write_lines(emb.vocab, vocab_path);
}

// Manifest: one shard path per line; relative paths resolve against the
// manifest's own directory. Blank lines are ignored.
inline std::vector<fs::path> read_manifest(const fs::path& manifest) {
  std::vector<fs::path> paths;
  for (auto& line : read_lines(manifest)) {
    if (line.empty()) continue;
    fs::path p(line);
    paths.push_back(p.is_absolute() ? p : manifest.parent_path() / p);
  }
  return paths;
}

inline void write_manifest(const std::vector<fs::path>& shards, const fs::path& manifest) {
  std::vector<std::string> lines;
  for (const auto& p : shards) lines.push_back(p.string());
  write_lines(lines, manifest);
}

// Several shards viewed as one row-indexed matrix.
class ActivationStore {
 public:
  ActivationStore() = default;
  explicit ActivationStore(std::vector<ActivationShard> shards) : shards_(std::move(shards)) {
    offsets_.reserve(shards_.size() + 1);
    offsets_.push_back(0);
    for (const auto& s : shards_) {
      require(shards_.front().dim() == s.dim(), ErrorKind::DimensionMismatch, "shards disagree on dim");
      offsets_.push_back(offsets_.back() + s.n_rows());
    }
  }

  static ActivationStore open(const fs::path& manifest) {
    std::vector<ActivationShard> shards;
    for (const auto& p : read_manifest(manifest)) shards.push_back(read_shard(p));
    return ActivationStore(std::move(shards));
  }

  std::size_t total_rows() const noexcept { return offsets_.empty() ? 0 : offsets_.back(); }
  std::size_t dim() const noexcept { return shards_.empty() ? 0 : shards_.front().dim(); }
  const std::vector<ActivationShard>& shards() const noexcept { return shards_; }

  std::span<const float> row(std::size_t global) const {
    auto [s, r] = locate(global);
    return shards_[s].data.row(r);
  }
  std::uint32_t token_id(std::size_t global) const {
    auto [s, r] = locate(global);
    return shards_[s].token_ids[r];
  }
  std::uint32_t doc_id(std::size_t global) const {
    auto [s, r] = locate(global);
    return shards_[s].doc_ids[r];
  }

 private:
  std::pair<std::size_t, std::size_t> locate(std::size_t global) const {
    require(global < total_rows(), ErrorKind::IndexOutOfRange, "row index past end of store");
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), global);
    std::size_t s = static_cast<std::size_t>(std::distance(offsets_.begin(), it)) - 1;
    return {s, global - offsets_[s]};
  }

  std::vector<ActivationShard> shards_;
  std::vector<std::size_t> offsets_;
};

struct BatchPlan {
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::vector<std::size_t> order;

  std::size_t num_batches() const noexcept { return (order.size() + batch_size - 1) / batch_size; }
  std::span<const std::size_t> batch(std::size_t i) const {
    const std::size_t begin = i * batch_size;
    return std::span<const std::size_t>(order).subspan(begin, std::min(batch_size, order.size() - begin));
  }
};

inline BatchPlan plan_batches(std::size_t total_rows, std::size_t batch_size, std::uint64_t seed) {
  require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
  BatchPlan plan{batch_size, seed, std::vector<std::size_t>(total_rows)};
  std::iota(plan.order.begin(), plan.order.end(), std::size_t{0});
  // Explicit Fisher-Yates so the permutation does not depend on the standard
  // library's shuffle implementation.
  Rng rng(mix_seed(seed));
  for (std::size_t i = total_rows; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(plan.order[i - 1], plan.order[j]);
  }
  return plan;
}

}  // namespace saex
