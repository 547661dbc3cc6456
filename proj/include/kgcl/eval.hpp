#pragma once

// Filtered link-prediction ranking, MRR, the retention matrix and forgetting.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/transe.hpp"

namespace kgcl {

// All known true triples, indexed by (head, relation) -> tails and
// (relation, tail) -> heads. Each list is sorted and duplicate-free.
class FilterIndex {
 public:
  FilterIndex() = default;

  explicit FilterIndex(const KnowledgeGraph& g) {
    for (const auto* split : {&g.train, &g.valid, &g.test}) {
      for (const auto& t : *split) insert(t);
    }
    finalize();
  }

  explicit FilterIndex(std::span<const Triple> triples) {
    for (const auto& t : triples) insert(t);
    finalize();
  }

  std::span<const EntityId> tails(EntityId head, RelationId rel) const { return lookup(tails_, key(head, rel)); }
  std::span<const EntityId> heads(RelationId rel, EntityId tail) const { return lookup(heads_, key(tail, rel)); }

  bool contains(const Triple& t) const {
    auto ts = tails(t.head, t.relation);
    return std::binary_search(ts.begin(), ts.end(), t.tail);
  }

  std::size_t size() const noexcept { return size_; }

 private:
  using Map = std::unordered_map<std::uint64_t, std::vector<EntityId>>;

  static std::uint64_t key(std::int32_t entity, std::int32_t rel) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(entity)) << 32) | static_cast<std::uint32_t>(rel);
  }

  static std::span<const EntityId> lookup(const Map& m, std::uint64_t k) {
    auto it = m.find(k);
    if (it == m.end()) return {};
    return it->second;
  }

  void insert(const Triple& t) {
    tails_[key(t.head, t.relation)].push_back(t.tail);
    heads_[key(t.tail, t.relation)].push_back(t.head);
  }

  void finalize() {
    size_ = 0;
    for (auto* m : {&tails_, &heads_}) {
      for (auto& [k, v] : *m) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        if (m == &tails_) size_ += v.size();
      }
    }
  }

  Map tails_;
  Map heads_;
  std::size_t size_ = 0;
};

enum class RankSide { head, tail };
enum class RankSides { both, tail_only };

// Reusable buffer for candidate distances.
struct RankScratch {
  std::vector<double> distances;
};

// Mid-tie rank of `target` among candidate distances, ignoring the candidates
// in `filtered` (other than target itself):
//   1 + #(strictly closer) + floor(#(equally close) / 2)
inline std::size_t rank_from_distances(std::span<const double> dist, EntityId target,
                                       std::span<const EntityId> filtered) {
  const double target_dist = dist[static_cast<std::size_t>(target)];
  std::size_t less = 0;
  std::size_t equal = 0;
  for (double d : dist) {
    less += d < target_dist ? 1 : 0;
    equal += d == target_dist ? 1 : 0;
  }
  --equal;  // the target itself
  for (EntityId c : filtered) {
    if (c == target) continue;
    const double d = dist[static_cast<std::size_t>(c)];
    if (d < target_dist) {
      --less;
    } else if (d == target_dist) {
      --equal;
    }
  }
  return 1 + less + equal / 2;
}

// Filtered rank of the true entity on one side of the triple. Every entity is
// scored as a replacement; candidates that form another known triple are
// dropped before ranking.
inline std::size_t filtered_rank(const TransEModel& model, const Triple& triple, RankSide side,
                                 const FilterIndex& filter, RankScratch& scratch) {
  check_bounds(model, triple);
  const std::size_t ne = model.num_entities();
  auto& dist = scratch.distances;
  dist.resize(ne);
  auto r = model.relations.row(static_cast<std::size_t>(triple.relation));
  if (side == RankSide::tail) {
    auto h = model.entities.row(static_cast<std::size_t>(triple.head));
    for (std::size_t c = 0; c < ne; ++c) dist[c] = translation_distance(h, r, model.entities.row(c));
  } else {
    auto t = model.entities.row(static_cast<std::size_t>(triple.tail));
    for (std::size_t c = 0; c < ne; ++c) dist[c] = translation_distance(model.entities.row(c), r, t);
  }

  const EntityId target = side == RankSide::tail ? triple.tail : triple.head;
  auto known = side == RankSide::tail ? filter.tails(triple.head, triple.relation)
                                      : filter.heads(triple.relation, triple.tail);
  return rank_from_distances(dist, target, known);
}

inline std::size_t filtered_rank(const TransEModel& model, const Triple& triple, RankSide side,
                                 const FilterIndex& filter) {
  RankScratch scratch;
  return filtered_rank(model, triple, side, filter, scratch);
}

struct EvalConfig {
  RankSides sides = RankSides::both;
  // Worker threads for ranking. Aggregation order is fixed, so the result
  // does not depend on this value.
  unsigned workers = 1;
};

// Mean of 1/rank over head and tail rankings (or tail only) of every triple.
inline double mrr(const TransEModel& model, std::span<const Triple> eval, const FilterIndex& filter,
                  const EvalConfig& config = {}) {
  if (eval.empty()) throw Error("MRR needs a non-empty evaluation set");
  const bool both = config.sides == RankSides::both;
  std::vector<double> recip(eval.size() * (both ? 2 : 1));

  auto work = [&](std::size_t begin, std::size_t end) {
    RankScratch scratch;
    for (std::size_t i = begin; i < end; ++i) {
      if (both) {
        recip[2 * i] = 1.0 / static_cast<double>(filtered_rank(model, eval[i], RankSide::head, filter, scratch));
        recip[2 * i + 1] = 1.0 / static_cast<double>(filtered_rank(model, eval[i], RankSide::tail, filter, scratch));
      } else {
        recip[i] = 1.0 / static_cast<double>(filtered_rank(model, eval[i], RankSide::tail, filter, scratch));
      }
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(config.workers, 1, eval.size());
  if (workers == 1) {
    work(0, eval.size());
  } else {
    std::vector<std::jthread> threads;
    const std::size_t chunk = (eval.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(eval.size(), b + chunk);
      if (b < e) threads.emplace_back(work, b, e);
    }
  }

  double sum = 0.0;
  for (double v : recip) sum += v;
  return sum / static_cast<double>(recip.size());
}

// Lower-triangular T x T matrix; entry (i, j) is the MRR on task j's
// evaluation set measured after training task i (0-based, j <= i).
class RetentionMatrix {
 public:
  RetentionMatrix() = default;
  explicit RetentionMatrix(std::size_t num_tasks) : n_(num_tasks), cells_(num_tasks * num_tasks) {}

  std::size_t num_tasks() const noexcept { return n_; }

  void set(std::size_t after_task, std::size_t task, double value) {
    check(after_task, task);
    auto& cell = cells_[after_task * n_ + task];
    if (cell) {
      throw Error("retention entry (" + std::to_string(after_task + 1) + ", " + std::to_string(task + 1) +
                  ") already written");
    }
    if (!(value >= 0.0 && value <= 1.0)) throw Error("retention entry must lie in [0, 1]");
    cell = value;
  }

  std::optional<double> get(std::size_t after_task, std::size_t task) const {
    if (after_task >= n_ || task >= n_) return std::nullopt;
    return cells_[after_task * n_ + task];
  }

  double at(std::size_t after_task, std::size_t task) const {
    auto v = get(after_task, task);
    if (!v) throw Error("retention entry missing");
    return *v;
  }

  bool row_complete(std::size_t after_task) const {
    for (std::size_t j = 0; j <= after_task; ++j) {
      if (!cells_[after_task * n_ + j]) return false;
    }
    return true;
  }

  bool complete() const {
    for (std::size_t i = 0; i < n_; ++i) {
      if (!row_complete(i)) return false;
    }
    return n_ > 0;
  }

  std::size_t populated() const {
    return static_cast<std::size_t>(std::count_if(cells_.begin(), cells_.end(), [](const auto& c) { return c.has_value(); }));
  }

  friend bool operator==(const RetentionMatrix&, const RetentionMatrix&) = default;

 private:
  void check(std::size_t after_task, std::size_t task) const {
    if (after_task >= n_ || task > after_task) throw Error("retention index outside the lower triangle");
  }

  std::size_t n_ = 0;
  std::vector<std::optional<double>> cells_;
};

// Rows are after-task indices, columns task indices (1-based labels); the
// upper triangle is left empty.
inline void write_retention_csv(std::ostream& out, const RetentionMatrix& m) {
  out << "after_task";
  for (std::size_t j = 0; j < m.num_tasks(); ++j) out << ",task_" << j + 1;
  out << '\n';
  for (std::size_t i = 0; i < m.num_tasks(); ++i) {
    out << i + 1;
    for (std::size_t j = 0; j < m.num_tasks(); ++j) {
      out << ',';
      if (auto v = m.get(i, j)) out << *v;
    }
    out << '\n';
  }
}

// Fills row i with the MRR of every task j <= i.
inline void retention_update(RetentionMatrix& matrix, std::size_t after_task, const TransEModel& model,
                             const TaskPartition& partition, const FilterIndex& filter, const EvalConfig& config = {}) {
  if (after_task >= matrix.num_tasks() || after_task >= partition.eval_tasks.size()) {
    throw Error("task index outside the retention matrix");
  }
  for (std::size_t j = 0; j <= after_task; ++j) {
    if (matrix.get(after_task, j)) throw Error("retention row already filled");
  }
  for (std::size_t j = 0; j <= after_task; ++j) {
    matrix.set(after_task, j, mrr(model, partition.eval_tasks[j], filter, config));
  }
}

struct ForgettingReport {
  // F_T^j = M_j^j - M_T^j for j < T, as fractions of MRR; may be negative.
  std::vector<double> per_task;
  double average = 0.0;
  // Mean over tasks of the final-row MRRs.
  double final_mrr = 0.0;

  std::vector<double> per_task_pp() const {
    std::vector<double> out(per_task);
    for (double& v : out) v *= 100.0;
    return out;
  }
  double average_pp() const { return average * 100.0; }

  friend bool operator==(const ForgettingReport&, const ForgettingReport&) = default;
};

inline ForgettingReport forgetting_report(const RetentionMatrix& m) {
  if (!m.complete()) throw Error("forgetting report needs a complete retention matrix");
  const std::size_t last = m.num_tasks() - 1;
  ForgettingReport r;
  for (std::size_t j = 0; j < last; ++j) r.per_task.push_back(m.at(j, j) - m.at(last, j));
  if (!r.per_task.empty()) {
    double s = 0.0;
    for (double v : r.per_task) s += v;
    r.average = s / static_cast<double>(r.per_task.size());
  }
  double s = 0.0;
  for (std::size_t j = 0; j <= last; ++j) s += m.at(last, j);
  r.final_mrr = s / static_cast<double>(m.num_tasks());
  return r;
}

}  // namespace kgcl
