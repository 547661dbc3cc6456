#pragma once

// Triple files, integer vocabularies and task partitioning.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kgcl/error.hpp"
#include "kgcl/random.hpp"

namespace kgcl {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

struct RawTriple {
  std::string head;
  std::string relation;
  std::string tail;

  friend bool operator==(const RawTriple&, const RawTriple&) = default;
};

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept {
    std::uint64_t k = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t.head)) << 32) ^
                      (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t.relation)) << 48) ^
                      static_cast<std::uint32_t>(t.tail);
    return static_cast<std::size_t>(splitmix64(k));
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Parses one tab-separated triple per line. Blank lines are skipped.
inline std::vector<RawTriple> parse_triple_stream(std::istream& in, const std::string& name) {
  std::vector<RawTriple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    const auto first = view.find('\t');
    const auto second = first == std::string_view::npos ? first : view.find('\t', first + 1);
    if (first == std::string_view::npos || second == std::string_view::npos ||
        view.find('\t', second + 1) != std::string_view::npos) {
      throw ParseError(name, lineno, "expected 3 tab-separated fields");
    }
    RawTriple t{std::string(detail::trim(view.substr(0, first))),
                std::string(detail::trim(view.substr(first + 1, second - first - 1))),
                std::string(detail::trim(view.substr(second + 1)))};
    if (t.head.empty() || t.relation.empty() || t.tail.empty()) {
      throw ParseError(name, lineno, "empty field");
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<RawTriple> parse_triple_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open triple file: " + path.string());
  auto triples = parse_triple_stream(in, path.string());
  if (in.bad()) throw Error("read failure: " + path.string());
  return triples;
}

// Dense bijection between strings and ids 0..size()-1, in first-seen order.
class Vocabulary {
 public:
  std::int32_t intern(const std::string& name) {
    auto [it, inserted] = index_.try_emplace(name, static_cast<std::int32_t>(names_.size()));
    if (inserted) names_.push_back(name);
    return it->second;
  }

  std::optional<std::int32_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& name(std::int32_t id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return names_.size(); }

 private:
  std::unordered_map<std::string, std::int32_t> index_;
  std::vector<std::string> names_;
};

struct KnowledgeGraph {
  Vocabulary entities;
  Vocabulary relations;
  std::vector<Triple> train;
  std::vector<Triple> valid;
  std::vector<Triple> test;
  // Entities seen in the training split; ids 0..train_entity_count-1.
  std::size_t train_entity_count = 0;
  // Raw training lines dropped as exact duplicates.
  std::size_t duplicate_train_triples = 0;

  std::size_t num_entities() const noexcept { return entities.size(); }
  std::size_t num_relations() const noexcept { return relations.size(); }

  RawTriple decode(const Triple& t) const {
    return {entities.name(t.head), relations.name(t.relation), entities.name(t.tail)};
  }
};

// Vocabulary ids follow first appearance over train, then valid, then test.
inline KnowledgeGraph build_graph(const std::vector<RawTriple>& train,
                                  const std::vector<RawTriple>& valid,
                                  const std::vector<RawTriple>& test) {
  KnowledgeGraph g;
  auto encode = [&g](const RawTriple& r) {
    Triple t;
    t.head = g.entities.intern(r.head);
    t.relation = g.relations.intern(r.relation);
    t.tail = g.entities.intern(r.tail);
    return t;
  };

  std::unordered_set<Triple, TripleHash> seen;
  seen.reserve(train.size());
  g.train.reserve(train.size());
  for (const auto& r : train) {
    const Triple t = encode(r);
    if (seen.insert(t).second) {
      g.train.push_back(t);
    } else {
      ++g.duplicate_train_triples;
    }
  }
  g.train_entity_count = g.entities.size();
  g.valid.reserve(valid.size());
  for (const auto& r : valid) g.valid.push_back(encode(r));
  g.test.reserve(test.size());
  for (const auto& r : test) g.test.push_back(encode(r));
  return g;
}

// Loads train.txt, valid.txt and test.txt from a dataset directory.
inline KnowledgeGraph load_dataset(const std::filesystem::path& dir) {
  return build_graph(parse_triple_file(dir / "train.txt"), parse_triple_file(dir / "valid.txt"),
                     parse_triple_file(dir / "test.txt"));
}

enum class PartitionStrategy { relation_roundrobin, random };

inline std::string_view to_string(PartitionStrategy s) {
  return s == PartitionStrategy::relation_roundrobin ? "relation" : "random";
}

inline PartitionStrategy parse_partition_strategy(std::string_view s) {
  if (s == "relation" || s == "relation_roundrobin" || s == "relation-based") {
    return PartitionStrategy::relation_roundrobin;
  }
  if (s == "random") return PartitionStrategy::random;
  throw Error("unknown partition strategy: " + std::string(s));
}

struct TaskPartition {
  PartitionStrategy strategy = PartitionStrategy::relation_roundrobin;
  std::size_t num_tasks = 0;
  std::vector<std::vector<Triple>> train_tasks;
  std::vector<std::vector<Triple>> eval_tasks;
  // relation id -> task index; relation_roundrobin only.
  std::map<RelationId, std::size_t> relation_assignment;
};

// Relations sorted by training frequency (descending, ties by ascending id);
// the relation at sorted position p goes to task p mod T. Test triples follow
// their relation.
inline TaskPartition partition_relation_roundrobin(const KnowledgeGraph& graph, std::size_t num_tasks) {
  if (num_tasks < 2) throw Error("partition needs at least 2 tasks");
  std::vector<std::size_t> freq(graph.num_relations(), 0);
  for (const auto& t : graph.train) ++freq[static_cast<std::size_t>(t.relation)];
  const auto trained = static_cast<std::size_t>(std::count_if(freq.begin(), freq.end(), [](auto f) { return f > 0; }));
  if (num_tasks > trained) {
    throw Error("cannot split " + std::to_string(trained) + " relations into " + std::to_string(num_tasks) + " tasks");
  }

  std::vector<RelationId> order(graph.num_relations());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<RelationId>(i);
  std::stable_sort(order.begin(), order.end(), [&freq](RelationId a, RelationId b) {
    return freq[static_cast<std::size_t>(a)] > freq[static_cast<std::size_t>(b)];
  });

  TaskPartition p;
  p.strategy = PartitionStrategy::relation_roundrobin;
  p.num_tasks = num_tasks;
  p.train_tasks.resize(num_tasks);
  p.eval_tasks.resize(num_tasks);
  std::vector<std::size_t> task_of(graph.num_relations());
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    task_of[static_cast<std::size_t>(order[pos])] = pos % num_tasks;
    p.relation_assignment[order[pos]] = pos % num_tasks;
  }
  for (const auto& t : graph.train) p.train_tasks[task_of[static_cast<std::size_t>(t.relation)]].push_back(t);
  for (const auto& t : graph.test) p.eval_tasks[task_of[static_cast<std::size_t>(t.relation)]].push_back(t);
  return p;
}

namespace detail {

// Cuts items into T contiguous chunks; the first size % T chunks get one extra.
inline std::vector<std::vector<Triple>> cut_chunks(const std::vector<Triple>& items, std::size_t num_tasks) {
  std::vector<std::vector<Triple>> chunks(num_tasks);
  const std::size_t base = items.size() / num_tasks;
  const std::size_t extra = items.size() % num_tasks;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < num_tasks; ++k) {
    const std::size_t n = base + (k < extra ? 1 : 0);
    chunks[k].assign(items.begin() + static_cast<std::ptrdiff_t>(offset),
                     items.begin() + static_cast<std::ptrdiff_t>(offset + n));
    offset += n;
  }
  return chunks;
}

}  // namespace detail

inline TaskPartition partition_random(const KnowledgeGraph& graph, std::size_t num_tasks, std::uint64_t seed) {
  if (num_tasks < 2) throw Error("partition needs at least 2 tasks");
  if (num_tasks > graph.train.size()) throw Error("more tasks than training triples");
  Rng rng = derive_stream(seed, "partition");
  std::vector<Triple> train = graph.train;
  std::vector<Triple> test = graph.test;
  rng.shuffle(std::span<Triple>(train));
  rng.shuffle(std::span<Triple>(test));

  TaskPartition p;
  p.strategy = PartitionStrategy::random;
  p.num_tasks = num_tasks;
  p.train_tasks = detail::cut_chunks(train, num_tasks);
  p.eval_tasks = detail::cut_chunks(test, num_tasks);
  return p;
}

inline TaskPartition make_partition(const KnowledgeGraph& graph, PartitionStrategy strategy, std::size_t num_tasks,
                                    std::uint64_t seed) {
  return strategy == PartitionStrategy::relation_roundrobin ? partition_relation_roundrobin(graph, num_tasks)
                                                            : partition_random(graph, num_tasks, seed);
}

// Tab-separated manifest: a per-task summary block, then (relation strategy)
// one line per relation with its task and training-triple count.
inline void write_partition_manifest(std::ostream& out, const KnowledgeGraph& graph, const TaskPartition& p) {
  out << "# strategy\t" << to_string(p.strategy) << "\n";
  out << "# tasks\t" << p.num_tasks << "\n";
  out << "task\trelations\ttrain_triples\teval_triples\n";
  std::vector<std::size_t> rel_count(p.num_tasks, 0);
  for (const auto& [rel, task] : p.relation_assignment) ++rel_count[task];
  for (std::size_t k = 0; k < p.num_tasks; ++k) {
    out << k + 1 << '\t';
    if (p.strategy == PartitionStrategy::relation_roundrobin) {
      out << rel_count[k];
    } else {
      out << '-';
    }
    out << '\t' << p.train_tasks[k].size() << '\t' << p.eval_tasks[k].size() << '\n';
  }
  if (p.strategy != PartitionStrategy::relation_roundrobin) return;

  std::vector<std::size_t> freq(graph.num_relations(), 0);
  for (const auto& t : graph.train) ++freq[static_cast<std::size_t>(t.relation)];
  out << "\ntask\trelation_id\trelation\ttrain_triples\n";
  for (std::size_t k = 0; k < p.num_tasks; ++k) {
    for (const auto& [rel, task] : p.relation_assignment) {
      if (task != k) continue;
      out << k + 1 << '\t' << rel << '\t' << graph.relations.name(rel) << '\t' << freq[static_cast<std::size_t>(rel)]
          << '\n';
    }
  }
}

}  // namespace kgcl
