#pragma once

// Slow reference implementations used only by the tests. They share no code
// with the library beyond the data types and the seeded generator.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "kgcl/kgcl.hpp"

namespace oracle {

using kgcl::Triple;
using kgcl::TransEModel;

inline double dist(const TransEModel& m, int h, int r, int t) {
  const std::size_t d = m.dim();
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double x = (m.entities.row(h)[i] + m.relations.row(r)[i]) - m.entities.row(t)[i];
    s += x * x;
  }
  return std::sqrt(s);
}

inline bool known(std::span<const Triple> truth, int h, int r, int t) {
  for (const auto& x : truth) {
    if (x.head == h && x.relation == r && x.tail == t) return true;
  }
  return false;
}

// Drops every candidate that forms a true triple (except the target), sorts
// the rest and reads the rank off the block of ties around the target.
inline std::size_t rank(const TransEModel& m, const Triple& q, bool tail_side, std::span<const Triple> truth) {
  const int ne = static_cast<int>(m.num_entities());
  const int target = tail_side ? q.tail : q.head;
  std::vector<double> keep;
  double target_d = 0.0;
  for (int c = 0; c < ne; ++c) {
    const double dc = tail_side ? dist(m, q.head, q.relation, c) : dist(m, c, q.relation, q.tail);
    if (c == target) {
      target_d = dc;
      keep.push_back(dc);
      continue;
    }
    const bool hit = tail_side ? known(truth, q.head, q.relation, c) : known(truth, c, q.relation, q.tail);
    if (!hit) keep.push_back(dc);
  }
  std::sort(keep.begin(), keep.end());
  const auto lo = static_cast<std::size_t>(std::lower_bound(keep.begin(), keep.end(), target_d) - keep.begin());
  const auto hi = static_cast<std::size_t>(std::upper_bound(keep.begin(), keep.end(), target_d) - keep.begin());
  return 1 + lo + (hi - lo - 1) / 2;
}

// Flat parameter vector: entity table then relation table.
inline std::vector<double> flatten(const TransEModel& m) {
  std::vector<double> out(m.entities.values().begin(), m.entities.values().end());
  out.insert(out.end(), m.relations.values().begin(), m.relations.values().end());
  return out;
}

inline void unflatten(TransEModel& m, std::span<const double> x) {
  auto e = m.entities.values();
  auto r = m.relations.values();
  std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(e.size()), e.begin());
  std::copy(x.begin() + static_cast<std::ptrdiff_t>(e.size()), x.end(), r.begin());
}

inline std::vector<double> densify(const TransEModel& m, const kgcl::SparseGradient& g) {
  std::vector<double> out(m.entities.values().size() + m.relations.values().size(), 0.0);
  const std::size_t d = m.dim();
  const std::size_t off = m.entities.values().size();
  for (std::size_t k = 0; k < g.entities.size(); ++k) {
    auto v = g.entities.values_at(k);
    for (std::size_t i = 0; i < d; ++i) out[static_cast<std::size_t>(g.entities.ids()[k]) * d + i] += v[i];
  }
  for (std::size_t k = 0; k < g.relations.size(); ++k) {
    auto v = g.relations.values_at(k);
    for (std::size_t i = 0; i < d; ++i) out[off + static_cast<std::size_t>(g.relations.ids()[k]) * d + i] += v[i];
  }
  return out;
}

struct Anchor {
  std::vector<double> theta;
  std::vector<double> fisher;
};

inline Anchor flatten(const kgcl::EwcAnchor& a) {
  Anchor out{flatten(a.theta_star()), {}};
  out.fisher.assign(a.fisher().entities.values().begin(), a.fisher().entities.values().end());
  out.fisher.insert(out.fisher.end(), a.fisher().relations.values().begin(), a.fisher().relations.values().end());
  return out;
}

// Summed hinge loss over the pairs plus the quadratic anchor penalty, written
// from the definitions.
inline double total_loss(const TransEModel& m, std::span<const kgcl::NegativeSample> pairs, double margin,
                         std::span<const Anchor> anchors, double lambda) {
  double loss = 0.0;
  for (const auto& p : pairs) {
    const double pos = dist(m, p.positive.head, p.positive.relation, p.positive.tail);
    const double neg = dist(m, p.negative.head, p.negative.relation, p.negative.tail);
    loss += std::max(0.0, margin + pos - neg);
  }
  const auto x = flatten(m);
  for (const auto& a : anchors) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += a.fisher[k] * (x[k] - a.theta[k]) * (x[k] - a.theta[k]);
    loss += 0.5 * lambda * s;
  }
  return loss;
}

inline std::vector<double> finite_difference(TransEModel m, std::span<const kgcl::NegativeSample> pairs, double margin,
                                             std::span<const Anchor> anchors, double lambda, double step = 1e-6) {
  auto x = flatten(m);
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    x[k] = keep + step;
    unflatten(m, x);
    const double up = total_loss(m, pairs, margin, anchors, lambda);
    x[k] = keep - step;
    unflatten(m, x);
    const double down = total_loss(m, pairs, margin, anchors, lambda);
    x[k] = keep;
    g[k] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(num) / scale;
}

// Dense Fisher: per batch a zeroed gradient vector receives every active
// pair's partials in pair order, then its square is added; the sum is divided
// by the batch count. Negatives come from rng in triple order.
inline std::vector<double> fisher(const TransEModel& m, std::span<const Triple> task, std::size_t batch, double margin,
                                  kgcl::Rng& rng) {
  const std::size_t d = m.dim();
  const std::size_t ne = m.num_entities();
  const std::size_t off = ne * d;
  std::vector<double> acc(off + m.num_relations() * d, 0.0);
  std::size_t batches = 0;
  for (std::size_t start = 0; start < task.size(); start += batch) {
    std::vector<double> g(acc.size(), 0.0);
    const std::size_t end = std::min(task.size(), start + batch);
    std::vector<Triple> negs;
    for (std::size_t i = start; i < end; ++i) {
      Triple n = task[i];
      n.tail = static_cast<int>(rng.uniform_index(ne));
      negs.push_back(n);
    }
    for (std::size_t i = start; i < end; ++i) {
      const Triple& p = task[i];
      const Triple& n = negs[i - start];
      const double dp = dist(m, p.head, p.relation, p.tail);
      const double dn = dist(m, n.head, n.relation, n.tail);
      if (!(margin + dp - dn > 0.0)) continue;
      std::vector<double> u(d, 0.0);
      std::vector<double> v(d, 0.0);
      for (std::size_t k = 0; k < d; ++k) {
        if (dp != 0.0) u[k] = ((m.entities.row(p.head)[k] + m.relations.row(p.relation)[k]) - m.entities.row(p.tail)[k]) / dp;
        if (dn != 0.0) v[k] = ((m.entities.row(n.head)[k] + m.relations.row(n.relation)[k]) - m.entities.row(n.tail)[k]) / dn;
      }
      for (std::size_t k = 0; k < d; ++k) g[p.head * d + k] += u[k];
      for (std::size_t k = 0; k < d; ++k) g[off + p.relation * d + k] += u[k];
      for (std::size_t k = 0; k < d; ++k) g[p.tail * d + k] -= u[k];
      for (std::size_t k = 0; k < d; ++k) g[n.head * d + k] -= v[k];
      for (std::size_t k = 0; k < d; ++k) g[off + n.relation * d + k] -= v[k];
      for (std::size_t k = 0; k < d; ++k) g[n.tail * d + k] += v[k];
    }
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k] * g[k];
    ++batches;
  }
  for (double& a : acc) a /= static_cast<double>(batches);
  return acc;
}

}  // namespace oracle
