#pragma once

// Negative sampling, the margin ranking loss and its subgradient, sparse Adam,
// and the per-task training loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/random.hpp"
#include "kgcl/transe.hpp"

namespace kgcl {

struct NegativeSample {
  Triple positive;
  Triple negative;
};

// Tail replaced by a uniform draw over all entities. No filtering against
// true triples, so the draw may return the positive tail itself.
inline NegativeSample sample_negative(const Triple& positive, std::size_t num_entities, Rng& rng) {
  NegativeSample s{positive, positive};
  s.negative.tail = static_cast<EntityId>(rng.uniform_index(num_entities));
  return s;
}

inline double margin_loss(double pos_score, double neg_score, double margin) noexcept {
  return std::max(0.0, margin + pos_score - neg_score);
}

// Rows of one parameter table touched by a gradient. Row order is insertion
// order, which keeps every downstream reduction deterministic.
class GradientRows {
 public:
  GradientRows() = default;
  GradientRows(std::size_t table_rows, std::size_t dim) : dim_(dim), slot_(table_rows, -1) {}

  // Zero-initialized on first access.
  std::span<double> row(std::int32_t id) {
    auto& slot = slot_.at(static_cast<std::size_t>(id));
    if (slot < 0) {
      slot = static_cast<std::int32_t>(ids_.size());
      ids_.push_back(id);
      values_.resize(values_.size() + dim_, 0.0);
    }
    return {values_.data() + static_cast<std::size_t>(slot) * dim_, dim_};
  }

  std::span<const double> find(std::int32_t id) const {
    const auto slot = slot_.at(static_cast<std::size_t>(id));
    if (slot < 0) return {};
    return {values_.data() + static_cast<std::size_t>(slot) * dim_, dim_};
  }

  const std::vector<std::int32_t>& ids() const noexcept { return ids_; }
  std::span<const double> values_at(std::size_t k) const { return {values_.data() + k * dim_, dim_}; }
  std::span<double> values_at(std::size_t k) { return {values_.data() + k * dim_, dim_}; }
  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t table_rows() const noexcept { return slot_.size(); }
  std::size_t dim() const noexcept { return dim_; }

  void clear() {
    for (auto id : ids_) slot_[static_cast<std::size_t>(id)] = -1;
    ids_.clear();
    values_.clear();
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::int32_t> slot_;
  std::vector<std::int32_t> ids_;
  std::vector<double> values_;
};

struct SparseGradient {
  GradientRows entities;
  GradientRows relations;

  SparseGradient() = default;
  explicit SparseGradient(const TransEModel& model)
      : entities(model.num_entities(), model.dim()), relations(model.num_relations(), model.dim()) {}

  bool empty() const noexcept { return entities.size() == 0 && relations.size() == 0; }

  void clear() {
    entities.clear();
    relations.clear();
  }

  void add(const SparseGradient& other) {
    auto merge = [](GradientRows& into, const GradientRows& from) {
      for (std::size_t k = 0; k < from.size(); ++k) {
        auto dst = into.row(from.ids()[k]);
        auto src = from.values_at(k);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    };
    merge(entities, other.entities);
    merge(relations, other.relations);
  }
};

inline void add_scaled(std::span<double> dst, std::span<const double> src, double sign) noexcept {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += sign * src[i];
}

struct BatchLoss {
  double loss = 0.0;
  std::size_t active_pairs = 0;
};

// Accumulates the subgradient of the summed hinge loss over a batch into
// grads. Inactive hinges (margin + pos - neg <= 0) contribute nothing; the
// distance subgradient at zero distance is the zero vector.
inline BatchLoss accumulate_loss_gradients(const TransEModel& model, std::span<const NegativeSample> batch,
                                           double margin, SparseGradient& grads) {
  const std::size_t d = model.dim();
  std::vector<double> u(d);
  std::vector<double> v(d);
  BatchLoss out;

  auto direction = [&](const Triple& t, std::vector<double>& dir) {
    auto h = model.entities.row(static_cast<std::size_t>(t.head));
    auto r = model.relations.row(static_cast<std::size_t>(t.relation));
    auto tl = model.entities.row(static_cast<std::size_t>(t.tail));
    const double dist = translation_distance(h, r, tl);
    if (dist == 0.0) {
      std::fill(dir.begin(), dir.end(), 0.0);
    } else {
      for (std::size_t i = 0; i < d; ++i) dir[i] = ((h[i] + r[i]) - tl[i]) / dist;
    }
    return dist;
  };

  for (const auto& pair : batch) {
    const double pos = direction(pair.positive, u);
    const double neg = direction(pair.negative, v);
    const double hinge = margin + pos - neg;
    if (!(hinge > 0.0)) continue;
    out.loss += hinge;
    ++out.active_pairs;

    // row() may reallocate, so each span is used before the next lookup.
    add_scaled(grads.entities.row(pair.positive.head), u, 1.0);
    add_scaled(grads.relations.row(pair.positive.relation), u, 1.0);
    add_scaled(grads.entities.row(pair.positive.tail), u, -1.0);
    add_scaled(grads.entities.row(pair.negative.head), v, -1.0);
    add_scaled(grads.relations.row(pair.negative.relation), v, -1.0);
    add_scaled(grads.entities.row(pair.negative.tail), v, 1.0);
  }
  return out;
}

struct LossAndGradient {
  double loss = 0.0;
  SparseGradient grads;
};

inline LossAndGradient loss_gradients(const TransEModel& model, std::span<const NegativeSample> batch, double margin) {
  LossAndGradient out{0.0, SparseGradient(model)};
  out.loss = accumulate_loss_gradients(model, batch, margin, out.grads).loss;
  return out;
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(const TransEModel& model, AdamConfig config = {})
      : config_(config),
        m_entities_(model.num_entities(), model.dim()),
        v_entities_(model.num_entities(), model.dim()),
        m_relations_(model.num_relations(), model.dim()),
        v_relations_(model.num_relations(), model.dim()) {}

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }

  void reset() {
    m_entities_.fill(0.0);
    v_entities_.fill(0.0);
    m_relations_.fill(0.0);
    v_relations_.fill(0.0);
    step_ = 0;
  }

  // Standard bias-corrected Adam applied only to rows present in grads. The
  // step counter advances once per call.
  void step(TransEModel& model, const SparseGradient& grads) {
    if (!m_entities_.same_shape(model.entities) || !m_relations_.same_shape(model.relations)) {
      throw ShapeError("adam state does not match model shape");
    }
    if (grads.entities.size() > 0 && grads.entities.table_rows() != model.num_entities()) {
      throw ShapeError("entity gradient does not match model shape");
    }
    if (grads.relations.size() > 0 && grads.relations.table_rows() != model.num_relations()) {
      throw ShapeError("relation gradient does not match model shape");
    }
    if (!grads.entities.all_finite() || !grads.relations.all_finite()) {
      throw NonFiniteError("non-finite gradient");
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    update(model.entities, m_entities_, v_entities_, grads.entities, bc1, bc2);
    update(model.relations, m_relations_, v_relations_, grads.relations, bc1, bc2);
  }

 private:
  void update(EmbeddingTable& params, EmbeddingTable& m, EmbeddingTable& v, const GradientRows& g, double bc1,
              double bc2) const {
    const auto [lr, b1, b2, eps] = config_;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const auto id = static_cast<std::size_t>(g.ids()[k]);
      auto grad = g.values_at(k);
      auto p = params.row(id);
      auto mr = m.row(id);
      auto vr = v.row(id);
      for (std::size_t i = 0; i < p.size(); ++i) {
        mr[i] = b1 * mr[i] + (1.0 - b1) * grad[i];
        vr[i] = b2 * vr[i] + (1.0 - b2) * grad[i] * grad[i];
        const double m_hat = mr[i] / bc1;
        const double v_hat = vr[i] / bc2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      }
    }
  }

  AdamConfig config_;
  EmbeddingTable m_entities_;
  EmbeddingTable v_entities_;
  EmbeddingTable m_relations_;
  EmbeddingTable v_relations_;
  std::uint64_t step_ = 0;
};

inline void adam_step(AdamState& state, TransEModel& model, const SparseGradient& grads) { state.step(model, grads); }

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  AdamConfig adam;
  // Renormalize touched entity rows after every batch instead of all rows
  // once per epoch.
  bool normalize_per_batch = false;
  bool reset_adam_between_tasks = false;

  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.epochs == b.epochs && a.batch_size == b.batch_size && a.adam.lr == b.adam.lr &&
           a.adam.beta1 == b.adam.beta1 && a.adam.beta2 == b.adam.beta2 && a.adam.eps == b.adam.eps &&
           a.normalize_per_batch == b.normalize_per_batch && a.reset_adam_between_tasks == b.reset_adam_between_tasks;
  }
};

// Adds penalty gradients (EWC) to a batch gradient before the Adam step.
using PenaltyHook = std::function<void(const TransEModel&, SparseGradient&)>;

struct TrainStreams {
  Rng shuffle;
  Rng negatives;

  static TrainStreams derive(std::uint64_t seed, std::size_t task) {
    return {derive_stream(seed, "shuffle", task), derive_stream(seed, "negatives", task)};
  }
};

struct EpochRecord {
  std::size_t task = 0;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t batches = 0;
  std::size_t examples_per_epoch = 0;
};

inline void write_train_log_csv(std::ostream& out, std::span<const TrainLog> logs) {
  out << "task,epoch,mean_loss,wall_seconds\n";
  for (const auto& log : logs) {
    for (const auto& e : log.epochs) {
      out << e.task + 1 << ',' << e.epoch + 1 << ',' << e.mean_loss << ',' << e.wall_seconds << '\n';
    }
  }
}

// Trains one task. Each epoch shuffles the task triples together with the
// replay triples, walks them in batches, draws one tail-corrupted negative
// per positive, adds penalty gradients, and takes one Adam step per batch.
inline TrainLog train_task(TransEModel& model, AdamState& adam, std::span<const Triple> task,
                           const TrainConfig& config, const PenaltyHook& penalty, std::span<const Triple> replay,
                           TrainStreams& rng, std::size_t task_index = 0) {
  if (task.empty()) throw Error("cannot train on an empty task");
  if (config.batch_size == 0) throw Error("batch size must be >= 1");

  TrainLog log;
  std::vector<Triple> pool;
  pool.reserve(task.size() + replay.size());
  std::vector<NegativeSample> batch;
  batch.reserve(config.batch_size);
  SparseGradient grads(model);
  log.examples_per_epoch = task.size() + replay.size();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    pool.assign(task.begin(), task.end());
    pool.insert(pool.end(), replay.begin(), replay.end());
    rng.shuffle.shuffle(std::span<Triple>(pool));

    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t offset = 0; offset < pool.size(); offset += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(pool.size(), offset + config.batch_size);
      batch.clear();
      for (std::size_t i = offset; i < end; ++i) {
        batch.push_back(sample_negative(pool[i], model.num_entities(), rng.negatives));
      }
      grads.clear();
      epoch_loss += accumulate_loss_gradients(model, batch, model.config.margin, grads).loss;
      if (penalty) penalty(model, grads);
      try {
        adam.step(model, grads);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " (task " + std::to_string(task_index + 1) + ", epoch " +
                             std::to_string(epoch + 1) + ", batch " + std::to_string(batch_index) + ")");
      }
      ++log.batches;
      if (model.config.normalize_entities && config.normalize_per_batch) {
        for (auto id : grads.entities.ids()) normalize_row(model.entities.row(static_cast<std::size_t>(id)));
      }
    }
    if (model.config.normalize_entities && !config.normalize_per_batch) normalize_entities(model);

    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    log.epochs.push_back({task_index, epoch, epoch_loss / static_cast<double>(pool.size()), elapsed.count()});
  }
  return log;
}

}  // namespace kgcl
