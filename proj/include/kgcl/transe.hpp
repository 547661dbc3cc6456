#pragma once

// TransE embedding tables and the translational L2 distance.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/random.hpp"

namespace kgcl {

// Row-major dense matrix of doubles.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const EmbeddingTable& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct ModelConfig {
  std::size_t dim = 50;
  double margin = 1.0;
  bool normalize_entities = true;

  void validate() const {
    if (dim < 1) throw Error("model dim must be >= 1");
    if (!(margin > 0.0)) throw Error("margin must be > 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TransEModel {
  ModelConfig config;
  std::uint64_t seed = 0;
  EmbeddingTable entities;
  EmbeddingTable relations;

  std::size_t dim() const noexcept { return config.dim; }
  std::size_t num_entities() const noexcept { return entities.rows(); }
  std::size_t num_relations() const noexcept { return relations.rows(); }

  friend bool operator==(const TransEModel&, const TransEModel&) = default;
};

// ||h + r - t||_2. Every scoring path goes through this so rankings and the
// standalone score() agree bit for bit.
inline double translation_distance(std::span<const double> h, std::span<const double> r,
                                   std::span<const double> t) noexcept {
  double sum = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double diff = (h[i] + r[i]) - t[i];
    sum += diff * diff;
  }
  return std::sqrt(sum);
}

inline void check_bounds(const TransEModel& model, const Triple& t) {
  const auto ne = static_cast<std::int64_t>(model.num_entities());
  const auto nr = static_cast<std::int64_t>(model.num_relations());
  if (t.head < 0 || t.head >= ne || t.tail < 0 || t.tail >= ne || t.relation < 0 || t.relation >= nr) {
    throw Error("triple id out of bounds: (" + std::to_string(t.head) + ", " + std::to_string(t.relation) + ", " +
                std::to_string(t.tail) + ")");
  }
}

inline double score(const TransEModel& model, const Triple& t) {
  check_bounds(model, t);
  return translation_distance(model.entities.row(static_cast<std::size_t>(t.head)),
                              model.relations.row(static_cast<std::size_t>(t.relation)),
                              model.entities.row(static_cast<std::size_t>(t.tail)));
}

// Rescales a row to unit L2 norm; zero rows stay zero.
inline void normalize_row(std::span<double> row) noexcept {
  double sq = 0.0;
  for (double v : row) sq += v * v;
  if (sq == 0.0) return;
  const double norm = std::sqrt(sq);
  for (double& v : row) v /= norm;
}

inline void normalize_entities(TransEModel& model) {
  for (std::size_t e = 0; e < model.num_entities(); ++e) normalize_row(model.entities.row(e));
}

// Uniform in [-6/sqrt(d), 6/sqrt(d)], entity rows then normalized.
inline TransEModel init_embeddings(std::size_t num_entities, std::size_t num_relations, const ModelConfig& config,
                                   std::uint64_t seed) {
  config.validate();
  if (num_entities < 1 || num_relations < 1) throw Error("model needs at least one entity and one relation");
  TransEModel m;
  m.config = config;
  m.seed = seed;
  m.entities = EmbeddingTable(num_entities, config.dim);
  m.relations = EmbeddingTable(num_relations, config.dim);
  Rng rng = derive_stream(seed, "init");
  const double bound = 6.0 / std::sqrt(static_cast<double>(config.dim));
  for (double& v : m.entities.values()) v = rng.uniform(-bound, bound);
  for (double& v : m.relations.values()) v = rng.uniform(-bound, bound);
  normalize_entities(m);
  return m;
}

inline bool all_finite(const TransEModel& model) {
  auto finite = [](std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
  };
  return finite(model.entities.values()) && finite(model.relations.values());
}

// ---------------------------------------------------------------------------
// Checkpoints. Layout is documented in docs/file-formats.md.

namespace checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[8] = {'K', 'G', 'C', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;
enum class Kind : std::uint32_t { model = 0, anchor = 1 };

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("truncated checkpoint");
  return v;
}

inline void put_table(std::ostream& out, const EmbeddingTable& t) {
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.values().size() * sizeof(double)));
}

inline void get_table(std::istream& in, EmbeddingTable& t) {
  in.read(reinterpret_cast<char*>(t.values().data()), static_cast<std::streamsize>(t.values().size() * sizeof(double)));
  if (!in) throw Error("truncated checkpoint");
}

inline void write_header(std::ostream& out, Kind kind, const TransEModel& m) {
  out.write(kMagic, sizeof(kMagic));
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(kind));
  put(out, m.seed);
  put(out, static_cast<std::uint64_t>(m.config.dim));
  put(out, static_cast<std::uint64_t>(m.num_entities()));
  put(out, static_cast<std::uint64_t>(m.num_relations()));
  put(out, m.config.margin);
  put(out, static_cast<std::uint8_t>(m.config.normalize_entities ? 1 : 0));
}

inline TransEModel read_header(std::istream& in, Kind expected) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw Error("not a kgcl checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  if (get<std::uint32_t>(in) != static_cast<std::uint32_t>(expected)) throw Error("unexpected checkpoint kind");
  TransEModel m;
  m.seed = get<std::uint64_t>(in);
  m.config.dim = static_cast<std::size_t>(get<std::uint64_t>(in));
  const auto ne = static_cast<std::size_t>(get<std::uint64_t>(in));
  const auto nr = static_cast<std::size_t>(get<std::uint64_t>(in));
  m.config.margin = get<double>(in);
  m.config.normalize_entities = get<std::uint8_t>(in) != 0;
  m.entities = EmbeddingTable(ne, m.config.dim);
  m.relations = EmbeddingTable(nr, m.config.dim);
  return m;
}

}  // namespace checkpoint

inline void save_model(const TransEModel& m, std::ostream& out) {
  checkpoint::write_header(out, checkpoint::Kind::model, m);
  checkpoint::put_table(out, m.entities);
  checkpoint::put_table(out, m.relations);
}

inline TransEModel load_model(std::istream& in) {
  TransEModel m = checkpoint::read_header(in, checkpoint::Kind::model);
  checkpoint::get_table(in, m.entities);
  checkpoint::get_table(in, m.relations);
  return m;
}

inline void save_model(const TransEModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  save_model(m, out);
}

inline TransEModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return load_model(in);
}

}  // namespace kgcl
