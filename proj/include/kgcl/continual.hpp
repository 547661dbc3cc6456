#pragma once

// Elastic Weight Consolidation and replay buffers.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/optim.hpp"
#include "kgcl/random.hpp"
#include "kgcl/transe.hpp"

namespace kgcl {

// Per-parameter importance, shaped like the model tables.
struct FisherDiagonal {
  EmbeddingTable entities;
  EmbeddingTable relations;

  FisherDiagonal() = default;
  explicit FisherDiagonal(const TransEModel& model)
      : entities(model.num_entities(), model.dim()), relations(model.num_relations(), model.dim()) {}

  friend bool operator==(const FisherDiagonal&, const FisherDiagonal&) = default;
};

// Batch-averaged squared gradients of the summed margin loss:
//   F = (1/B) * sum_b (dL_b/dtheta)^2
// Batches walk the task in order with fresh tail-corrupted negatives. The
// model is not modified.
inline FisherDiagonal compute_fisher_diagonal(const TransEModel& model, std::span<const Triple> task,
                                              std::size_t batch_size, double margin, Rng& rng) {
  if (task.empty()) throw Error("cannot compute Fisher information on an empty task");
  if (batch_size == 0) throw Error("batch size must be >= 1");
  FisherDiagonal fisher(model);
  SparseGradient grads(model);
  std::vector<NegativeSample> batch;
  batch.reserve(batch_size);

  auto accumulate = [](EmbeddingTable& into, const GradientRows& g) {
    for (std::size_t k = 0; k < g.size(); ++k) {
      auto dst = into.row(static_cast<std::size_t>(g.ids()[k]));
      auto src = g.values_at(k);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i] * src[i];
    }
  };

  std::size_t num_batches = 0;
  for (std::size_t offset = 0; offset < task.size(); offset += batch_size) {
    const std::size_t end = std::min(task.size(), offset + batch_size);
    batch.clear();
    for (std::size_t i = offset; i < end; ++i) batch.push_back(sample_negative(task[i], model.num_entities(), rng));
    grads.clear();
    accumulate_loss_gradients(model, batch, margin, grads);
    accumulate(fisher.entities, grads.entities);
    accumulate(fisher.relations, grads.relations);
    ++num_batches;
  }
  const auto b = static_cast<double>(num_batches);
  for (double& v : fisher.entities.values()) v /= b;
  for (double& v : fisher.relations.values()) v /= b;
  return fisher;
}

// Parameters and Fisher diagonal snapshotted after a task. Immutable.
class EwcAnchor {
 public:
  EwcAnchor(std::size_t task_index, const TransEModel& theta_star, FisherDiagonal fisher)
      : task_index_(task_index), theta_star_(theta_star), fisher_(std::move(fisher)) {
    if (!fisher_.entities.same_shape(theta_star_.entities) || !fisher_.relations.same_shape(theta_star_.relations)) {
      throw ShapeError("Fisher diagonal does not match anchor parameters");
    }
  }

  std::size_t task_index() const noexcept { return task_index_; }
  const TransEModel& theta_star() const noexcept { return theta_star_; }
  const FisherDiagonal& fisher() const noexcept { return fisher_; }

 private:
  std::size_t task_index_;
  TransEModel theta_star_;
  FisherDiagonal fisher_;
};

namespace detail {

inline void check_anchor_shape(const TransEModel& model, const EwcAnchor& a) {
  if (!a.theta_star().entities.same_shape(model.entities) || !a.theta_star().relations.same_shape(model.relations)) {
    throw ShapeError("EWC anchor for task " + std::to_string(a.task_index() + 1) + " does not match model shape");
  }
}

inline bool row_nonzero(std::span<const double> row) {
  return std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; });
}

}  // namespace detail

// sum_j (lambda/2) sum_k F_k^j (theta_k - theta*_{k,j})^2
inline double ewc_penalty(const TransEModel& model, std::span<const EwcAnchor> anchors, double lambda) {
  double total = 0.0;
  auto table_sum = [](const EmbeddingTable& theta, const EmbeddingTable& star, const EmbeddingTable& f) {
    double s = 0.0;
    auto th = theta.values();
    auto st = star.values();
    auto fv = f.values();
    for (std::size_t k = 0; k < th.size(); ++k) {
      const double diff = th[k] - st[k];
      s += fv[k] * diff * diff;
    }
    return s;
  };
  for (const auto& a : anchors) {
    detail::check_anchor_shape(model, a);
    const double s = table_sum(model.entities, a.theta_star().entities, a.fisher().entities) +
                     table_sum(model.relations, a.theta_star().relations, a.fisher().relations);
    total += 0.5 * lambda * s;
  }
  return total;
}

// Adds sum_j lambda F_k^j (theta_k - theta*_{k,j}) over every row with a
// nonzero Fisher entry in any anchor. Nothing is added when lambda is zero.
inline void accumulate_ewc_gradients(const TransEModel& model, std::span<const EwcAnchor> anchors, double lambda,
                                     SparseGradient& grads) {
  for (const auto& a : anchors) detail::check_anchor_shape(model, a);
  if (lambda == 0.0) return;
  auto per_table = [lambda](const EmbeddingTable& theta, const EmbeddingTable& star, const EmbeddingTable& f,
                            GradientRows& out) {
    for (std::size_t r = 0; r < theta.rows(); ++r) {
      auto fr = f.row(r);
      if (!detail::row_nonzero(fr)) continue;
      auto g = out.row(static_cast<std::int32_t>(r));
      auto th = theta.row(r);
      auto st = star.row(r);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += lambda * fr[i] * (th[i] - st[i]);
    }
  };
  for (const auto& a : anchors) {
    per_table(model.entities, a.theta_star().entities, a.fisher().entities, grads.entities);
    per_table(model.relations, a.theta_star().relations, a.fisher().relations, grads.relations);
  }
}

inline SparseGradient ewc_penalty_gradients(const TransEModel& model, std::span<const EwcAnchor> anchors,
                                            double lambda) {
  SparseGradient grads(model);
  accumulate_ewc_gradients(model, anchors, lambda, grads);
  return grads;
}

// Training-time EWC term. Keeps the per-task anchors and, for speed, the
// aggregates S = sum_j F^j and W = sum_j F^j * theta*_j, so the gradient
// lambda * (S * theta - W) costs one pass regardless of the anchor count.
class EwcRegularizer {
 public:
  explicit EwcRegularizer(double lambda) : lambda_(lambda) {
    if (!(lambda >= 0.0)) throw Error("EWC lambda must be >= 0");
  }

  double lambda() const noexcept { return lambda_; }
  const std::vector<EwcAnchor>& anchors() const noexcept { return anchors_; }

  void add_anchor(EwcAnchor anchor) {
    const auto& theta = anchor.theta_star();
    if (anchors_.empty()) {
      sum_f_ = FisherDiagonal(theta);
      weighted_ = FisherDiagonal(theta);
    } else {
      detail::check_anchor_shape(anchors_.front().theta_star(), anchor);
    }
    fold(theta.entities, anchor.fisher().entities, sum_f_.entities, weighted_.entities, entity_rows_);
    fold(theta.relations, anchor.fisher().relations, sum_f_.relations, weighted_.relations, relation_rows_);
    anchors_.push_back(std::move(anchor));
  }

  double penalty(const TransEModel& model) const { return ewc_penalty(model, anchors_, lambda_); }

  void add_gradients(const TransEModel& model, SparseGradient& grads) const {
    if (anchors_.empty() || lambda_ == 0.0) return;
    detail::check_anchor_shape(model, anchors_.front());
    apply(model.entities, sum_f_.entities, weighted_.entities, entity_rows_, grads.entities);
    apply(model.relations, sum_f_.relations, weighted_.relations, relation_rows_, grads.relations);
  }

  PenaltyHook hook() const {
    return [this](const TransEModel& model, SparseGradient& grads) { add_gradients(model, grads); };
  }

 private:
  static void fold(const EmbeddingTable& theta, const EmbeddingTable& f, EmbeddingTable& sum_f,
                   EmbeddingTable& weighted, std::vector<std::int32_t>& rows) {
    std::vector<std::int32_t> added;
    for (std::size_t r = 0; r < f.rows(); ++r) {
      auto fr = f.row(r);
      if (!detail::row_nonzero(fr)) continue;
      if (!detail::row_nonzero(sum_f.row(r))) added.push_back(static_cast<std::int32_t>(r));
      auto s = sum_f.row(r);
      auto w = weighted.row(r);
      auto th = theta.row(r);
      for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] += fr[i];
        w[i] += fr[i] * th[i];
      }
    }
    rows.insert(rows.end(), added.begin(), added.end());
    std::sort(rows.begin(), rows.end());
  }

  void apply(const EmbeddingTable& theta, const EmbeddingTable& sum_f, const EmbeddingTable& weighted,
             const std::vector<std::int32_t>& rows, GradientRows& out) const {
    for (auto r : rows) {
      auto g = out.row(r);
      auto th = theta.row(static_cast<std::size_t>(r));
      auto s = sum_f.row(static_cast<std::size_t>(r));
      auto w = weighted.row(static_cast<std::size_t>(r));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += lambda_ * (s[i] * th[i] - w[i]);
    }
  }

  double lambda_;
  std::vector<EwcAnchor> anchors_;
  FisherDiagonal sum_f_;
  FisherDiagonal weighted_;
  std::vector<std::int32_t> entity_rows_;
  std::vector<std::int32_t> relation_rows_;
};

inline void save_anchor(const EwcAnchor& a, std::ostream& out) {
  checkpoint::write_header(out, checkpoint::Kind::anchor, a.theta_star());
  checkpoint::put(out, static_cast<std::uint64_t>(a.task_index()));
  checkpoint::put_table(out, a.theta_star().entities);
  checkpoint::put_table(out, a.theta_star().relations);
  checkpoint::put_table(out, a.fisher().entities);
  checkpoint::put_table(out, a.fisher().relations);
}

inline EwcAnchor load_anchor(std::istream& in) {
  TransEModel theta = checkpoint::read_header(in, checkpoint::Kind::anchor);
  const auto task = static_cast<std::size_t>(checkpoint::get<std::uint64_t>(in));
  checkpoint::get_table(in, theta.entities);
  checkpoint::get_table(in, theta.relations);
  FisherDiagonal f(theta);
  checkpoint::get_table(in, f.entities);
  checkpoint::get_table(in, f.relations);
  return EwcAnchor(task, theta, std::move(f));
}

// ---------------------------------------------------------------------------
// Replay

enum class ReplayStrategy { random, wave };

inline std::string_view to_string(ReplayStrategy s) { return s == ReplayStrategy::random ? "random" : "wave"; }

struct ReplayBuffer {
  ReplayStrategy strategy = ReplayStrategy::random;
  std::size_t capacity_per_task = 500;
  std::vector<Triple> stored;
  std::vector<std::size_t> source_task;

  std::size_t count_for(std::size_t task) const {
    return static_cast<std::size_t>(std::count(source_task.begin(), source_task.end(), task));
  }

  void absorb(const ReplayBuffer& other) {
    stored.insert(stored.end(), other.stored.begin(), other.stored.end());
    source_task.insert(source_task.end(), other.source_task.begin(), other.source_task.end());
  }
};

inline constexpr std::size_t kReplayWaves = 5;

// random: uniform sample without replacement of min(capacity, |task|).
// wave: the task in its training order is split into capacity/5 strata and
// five passes ("waves") each take the triple at an evenly spaced offset inside
// every stratum; duplicates are skipped and any shortfall is topped up
// uniformly from the unselected triples.
inline ReplayBuffer build_replay_buffer(std::span<const Triple> task, ReplayStrategy strategy, std::size_t capacity,
                                        Rng& rng, std::size_t task_index = 0) {
  ReplayBuffer buf;
  buf.strategy = strategy;
  buf.capacity_per_task = capacity;
  const std::size_t n = task.size();
  const std::size_t take = std::min(capacity, n);
  if (take == 0) return buf;

  std::vector<std::size_t> chosen;
  chosen.reserve(take);
  std::vector<char> used(n, 0);

  auto top_up = [&] {
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i]) rest.push_back(i);
    }
    for (std::size_t k = 0; chosen.size() < take; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng.uniform_index(rest.size() - k));
      std::swap(rest[k], rest[j]);
      used[rest[k]] = 1;
      chosen.push_back(rest[k]);
    }
  };

  if (strategy == ReplayStrategy::random) {
    top_up();
  } else {
    const std::size_t per_wave = (take + kReplayWaves - 1) / kReplayWaves;
    const double stride = static_cast<double>(n) / static_cast<double>(per_wave);
    for (std::size_t w = 0; w < kReplayWaves && chosen.size() < take; ++w) {
      const double phase = (static_cast<double>(w) + 0.5) / static_cast<double>(kReplayWaves);
      for (std::size_t k = 0; k < per_wave && chosen.size() < take; ++k) {
        auto pos = static_cast<std::size_t>((static_cast<double>(k) + phase) * stride);
        pos = std::min(pos, n - 1);
        if (used[pos]) continue;
        used[pos] = 1;
        chosen.push_back(pos);
      }
    }
    if (chosen.size() < take) top_up();
  }

  buf.stored.reserve(take);
  for (auto i : chosen) buf.stored.push_back(task[i]);
  buf.source_task.assign(take, task_index);
  return buf;
}

}  // namespace kgcl
