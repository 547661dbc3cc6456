#pragma once

// Synthetic knowledge graphs with translational structure, for tests, demos
// and scale checks when a real benchmark is not at hand.
//
// Entities carry a hidden latent vector and a type (id mod types). Each
// relation maps a domain type to a range type through a hidden translation;
// a triple (h, r, t) picks t among the `fanout` range entities nearest to
// latent(h) + offset(r), or uniformly from the range type with probability
// `noise`. Relation frequencies follow a Zipf law so frequency-sorted
// round-robin partitioning behaves as on real data.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/random.hpp"

namespace kgcl {

struct SyntheticSpec {
  std::size_t entities = 500;
  std::size_t relations = 20;
  std::size_t types = 5;
  std::size_t latent_dim = 8;
  std::size_t fanout = 3;
  std::size_t triples = 6000;
  double valid_fraction = 0.05;
  double test_fraction = 0.10;
  double noise = 0.05;
  double zipf = 0.8;
  std::uint64_t seed = 7;
};

struct SyntheticSplits {
  std::vector<RawTriple> train;
  std::vector<RawTriple> valid;
  std::vector<RawTriple> test;
};

// May return fewer than spec.triples distinct triples when the structure
// cannot supply that many.
inline SyntheticSplits generate_synthetic(const SyntheticSpec& spec) {
  if (spec.entities < 2 || spec.relations < 1 || spec.types < 1 || spec.types > spec.entities) {
    throw Error("invalid synthetic graph shape");
  }
  Rng rng = derive_stream(spec.seed, "synthetic");
  const std::size_t k = spec.latent_dim;

  std::vector<double> latent(spec.entities * k);
  for (double& v : latent) v = rng.uniform(-1.0, 1.0);
  std::vector<std::vector<std::size_t>> by_type(spec.types);
  for (std::size_t e = 0; e < spec.entities; ++e) by_type[e % spec.types].push_back(e);

  struct Rel {
    std::size_t domain, range;
    std::vector<double> offset;
  };
  std::vector<Rel> rels(spec.relations);
  std::vector<double> cumulative(spec.relations);
  double total_w = 0.0;
  for (std::size_t r = 0; r < spec.relations; ++r) {
    rels[r].domain = static_cast<std::size_t>(rng.uniform_index(spec.types));
    rels[r].range = static_cast<std::size_t>(rng.uniform_index(spec.types));
    rels[r].offset.resize(k);
    for (double& v : rels[r].offset) v = rng.uniform(-1.0, 1.0);
    total_w += std::pow(static_cast<double>(r + 1), -spec.zipf);
    cumulative[r] = total_w;
  }

  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> nearest_cache;
  auto nearest = [&](std::size_t h, std::size_t r) -> const std::vector<std::size_t>& {
    auto [it, inserted] = nearest_cache.try_emplace({h, r});
    if (!inserted) return it->second;
    const auto& range = by_type[rels[r].range];
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(range.size());
    for (auto t : range) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const double diff = latent[h * k + i] + rels[r].offset[i] - latent[t * k + i];
        s += diff * diff;
      }
      d.emplace_back(s, t);
    }
    const std::size_t m = std::min(spec.fanout, d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
    for (std::size_t i = 0; i < m; ++i) it->second.push_back(d[i].second);
    return it->second;
  };

  std::vector<Triple> triples;
  std::unordered_set<Triple, TripleHash> seen;
  const std::size_t max_attempts = spec.triples * 50;
  for (std::size_t attempt = 0; attempt < max_attempts && triples.size() < spec.triples; ++attempt) {
    const double u = rng.uniform01() * total_w;
    const auto r = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    const auto rr = std::min(r, spec.relations - 1);
    const auto& dom = by_type[rels[rr].domain];
    const std::size_t h = dom[static_cast<std::size_t>(rng.uniform_index(dom.size()))];
    std::size_t t;
    if (rng.uniform01() < spec.noise) {
      const auto& range = by_type[rels[rr].range];
      t = range[static_cast<std::size_t>(rng.uniform_index(range.size()))];
    } else {
      const auto& cand = nearest(h, rr);
      t = cand[static_cast<std::size_t>(rng.uniform_index(cand.size()))];
    }
    Triple tr{static_cast<EntityId>(h), static_cast<RelationId>(rr), static_cast<EntityId>(t)};
    if (seen.insert(tr).second) triples.push_back(tr);
  }

  rng.shuffle(std::span<Triple>(triples));
  const auto n_test = static_cast<std::size_t>(spec.test_fraction * static_cast<double>(triples.size()));
  const auto n_valid = static_cast<std::size_t>(spec.valid_fraction * static_cast<double>(triples.size()));
  std::vector<Triple> test(triples.begin(), triples.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<Triple> valid(triples.begin() + static_cast<std::ptrdiff_t>(n_test),
                            triples.begin() + static_cast<std::ptrdiff_t>(n_test + n_valid));
  std::vector<Triple> train(triples.begin() + static_cast<std::ptrdiff_t>(n_test + n_valid), triples.end());

  // Every relation that occurs at all gets at least one training triple.
  std::vector<char> in_train(spec.relations, 0);
  for (const auto& t : train) in_train[static_cast<std::size_t>(t.relation)] = 1;
  for (auto* split : {&test, &valid}) {
    for (auto it = split->begin(); it != split->end();) {
      if (!in_train[static_cast<std::size_t>(it->relation)]) {
        in_train[static_cast<std::size_t>(it->relation)] = 1;
        train.push_back(*it);
        it = split->erase(it);
      } else {
        ++it;
      }
    }
  }

  auto name = [](const Triple& t) {
    return RawTriple{"/e/" + std::to_string(t.head), "/r/" + std::to_string(t.relation), "/e/" + std::to_string(t.tail)};
  };
  SyntheticSplits out;
  for (const auto& t : train) out.train.push_back(name(t));
  for (const auto& t : valid) out.valid.push_back(name(t));
  for (const auto& t : test) out.test.push_back(name(t));
  return out;
}

inline void write_triple_file(const std::filesystem::path& path, const std::vector<RawTriple>& triples) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& t : triples) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
}

inline void write_dataset(const std::filesystem::path& dir, const SyntheticSplits& s) {
  std::filesystem::create_directories(dir);
  write_triple_file(dir / "train.txt", s.train);
  write_triple_file(dir / "valid.txt", s.valid);
  write_triple_file(dir / "test.txt", s.test);
}

}  // namespace kgcl
