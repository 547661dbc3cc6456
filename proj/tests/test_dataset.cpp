#include <catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kgcl/dataset.hpp"
#include "kgcl/synthetic.hpp"

using namespace kgcl;

namespace {

// Relation "r<k>" gets freq[k] training triples over fresh entities; one
// test triple per relation.
KnowledgeGraph graph_with_frequencies(const std::vector<int>& freq, const std::vector<int>& intern_order) {
  std::vector<RawTriple> train;
  std::vector<RawTriple> test;
  int e = 0;
  for (int k : intern_order) {
    const std::string r = "r" + std::to_string(k);
    for (int i = 0; i < freq[k]; ++i, e += 2) train.push_back({"e" + std::to_string(e), r, "e" + std::to_string(e + 1)});
    test.push_back({"e0", r, "e1"});
  }
  return build_graph(train, {}, test);
}

std::vector<Triple> sorted(std::vector<Triple> v) {
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<Triple> concat(const std::vector<std::vector<Triple>>& parts) {
  std::vector<Triple> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

KnowledgeGraph synthetic_graph(std::uint64_t seed = 7) {
  SyntheticSpec spec;
  spec.entities = 120;
  spec.relations = 12;
  spec.triples = 1500;
  spec.seed = seed;
  auto s = generate_synthetic(spec);
  return build_graph(s.train, s.valid, s.test);
}

}  // namespace

TEST_CASE("parse a tab-separated line") {
  std::istringstream in("/m/a\t/film/genre\t/m/b\n");
  auto t = parse_triple_stream(in, "x");
  REQUIRE(t.size() == 1);
  CHECK(t[0] == RawTriple{"/m/a", "/film/genre", "/m/b"});
}

TEST_CASE("empty input gives no triples") {
  std::istringstream in("");
  CHECK(parse_triple_stream(in, "x").empty());
}

TEST_CASE("blank lines are skipped and order kept") {
  std::istringstream in("a\tr\tb\n\n   \nc\tr\td\r\n");
  auto t = parse_triple_stream(in, "x");
  REQUIRE(t.size() == 2);
  CHECK(t[0].head == "a");
  CHECK(t[1] == RawTriple{"c", "r", "d"});
}

TEST_CASE("malformed line reports its line number") {
  for (std::string bad : {"a\tb\n", "a\tb\tc\td\n", "a b c\n", "a\t\tc\n"}) {
    std::istringstream in("x\ty\tz\n\n" + bad);
    try {
      parse_triple_stream(in, "train.txt");
      FAIL("expected a parse error for: " << bad);
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find('3') != std::string::npos);
    }
  }
}

TEST_CASE("missing file is an error") {
  CHECK_THROWS_AS(parse_triple_file("/nonexistent/train.txt"), Error);
}

TEST_CASE("minimal graph") {
  auto g = build_graph({{"a", "r", "b"}}, {}, {});
  CHECK(g.num_entities() == 2);
  CHECK(g.num_relations() == 1);
  CHECK(g.train_entity_count == 2);
}

TEST_CASE("ids follow first appearance over train, valid, test") {
  auto g = build_graph({{"b", "r1", "a"}}, {{"c", "r2", "a"}}, {{"d", "r1", "e"}});
  CHECK(*g.entities.find("b") == 0);
  CHECK(*g.entities.find("a") == 1);
  CHECK(*g.entities.find("c") == 2);
  CHECK(*g.entities.find("d") == 3);
  CHECK(*g.entities.find("e") == 4);
  CHECK(*g.relations.find("r2") == 1);
  CHECK(g.num_entities() == 5);
  CHECK(g.train_entity_count == 2);
  CHECK(g.test[0] == Triple{3, 0, 4});
}

TEST_CASE("duplicate training lines are dropped") {
  auto g = build_graph({{"a", "r", "b"}, {"a", "r", "b"}, {"b", "r", "a"}}, {}, {});
  CHECK(g.train.size() == 2);
  CHECK(g.duplicate_train_triples == 1);
}

TEST_CASE("encoding then decoding recovers the strings") {
  auto s = generate_synthetic({});
  auto g = build_graph(s.train, s.valid, s.test);
  for (std::size_t i = 0; i < s.test.size(); ++i) REQUIRE(g.decode(g.test[i]) == s.test[i]);
  for (std::size_t i = 0; i < s.valid.size(); ++i) REQUIRE(g.decode(g.valid[i]) == s.valid[i]);
  for (const auto& t : g.train) {
    REQUIRE(std::find(s.train.begin(), s.train.end(), g.decode(t)) != s.train.end());
  }
}

TEST_CASE("load_dataset reads the three split files") {
  const auto dir = std::filesystem::temp_directory_path() / "kgcl_test_dataset";
  std::filesystem::remove_all(dir);
  SyntheticSpec spec;
  spec.triples = 800;
  const auto s = generate_synthetic(spec);
  write_dataset(dir, s);
  auto g = load_dataset(dir);
  CHECK(g.train.size() == s.train.size());
  CHECK(g.valid.size() == s.valid.size());
  CHECK(g.test.size() == s.test.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("round-robin over frequencies 10..3") {
  const std::vector<int> freq{10, 9, 8, 7, 6, 5, 4, 3};
  auto g = graph_with_frequencies(freq, {0, 1, 2, 3, 4, 5, 6, 7});
  auto p = partition_relation_roundrobin(g, 4);
  for (int k = 0; k < 8; ++k) CHECK(p.relation_assignment.at(*g.relations.find("r" + std::to_string(k))) == std::size_t(k % 4));
  CHECK(p.train_tasks[0].size() == 16);
  CHECK(p.train_tasks[1].size() == 14);
  CHECK(p.train_tasks[2].size() == 12);
  CHECK(p.train_tasks[3].size() == 10);
}

TEST_CASE("round-robin sorts by frequency, not by id") {
  const std::vector<int> freq{10, 9, 8, 7, 6, 5, 4, 3};
  auto g = graph_with_frequencies(freq, {5, 2, 7, 0, 3, 6, 1, 4});
  auto p = partition_relation_roundrobin(g, 4);
  for (int k = 0; k < 8; ++k) CHECK(p.relation_assignment.at(*g.relations.find("r" + std::to_string(k))) == std::size_t(k % 4));
}

TEST_CASE("round-robin ties are broken by ascending relation id") {
  auto g = graph_with_frequencies({2, 2, 2, 2, 2}, {0, 1, 2, 3, 4});
  auto p = partition_relation_roundrobin(g, 2);
  for (int id = 0; id < 5; ++id) CHECK(p.relation_assignment.at(id) == std::size_t(id % 2));
}

TEST_CASE("round-robin rejects bad task counts") {
  auto g = graph_with_frequencies({3, 2, 1}, {0, 1, 2});
  CHECK_THROWS_AS(partition_relation_roundrobin(g, 1), Error);
  CHECK_THROWS_AS(partition_relation_roundrobin(g, 4), Error);
  CHECK_NOTHROW(partition_relation_roundrobin(g, 3));
}

TEST_CASE("relation partition keeps every relation in one task") {
  auto g = synthetic_graph();
  auto p = partition_relation_roundrobin(g, 4);
  std::map<RelationId, std::size_t> owner;
  for (std::size_t k = 0; k < 4; ++k) {
    for (const auto* split : {&p.train_tasks[k], &p.eval_tasks[k]}) {
      for (const auto& t : *split) {
        auto [it, fresh] = owner.try_emplace(t.relation, k);
        REQUIRE(it->second == k);
        REQUIRE(p.relation_assignment.at(t.relation) == k);
      }
    }
  }
  CHECK(sorted(concat(p.train_tasks)) == sorted(g.train));
  CHECK(sorted(concat(p.eval_tasks)) == sorted(g.test));
}

TEST_CASE("random chunks of 10 triples over 4 tasks are 3,3,2,2") {
  std::vector<RawTriple> train;
  for (int i = 0; i < 10; ++i) train.push_back({"h" + std::to_string(i), "r", "t"});
  auto g = build_graph(train, {}, {});
  for (std::uint64_t seed : {1ULL, 42ULL, 2024ULL}) {
    auto p = partition_random(g, 4, seed);
    CHECK(p.train_tasks[0].size() == 3);
    CHECK(p.train_tasks[1].size() == 3);
    CHECK(p.train_tasks[2].size() == 2);
    CHECK(p.train_tasks[3].size() == 2);
  }
  CHECK_THROWS_AS(partition_random(g, 11, 1), Error);
  CHECK_THROWS_AS(partition_random(g, 1, 1), Error);
}

TEST_CASE("random partition is complete and seeded") {
  auto g = synthetic_graph();
  auto a = partition_random(g, 4, 42);
  auto b = partition_random(g, 4, 42);
  auto c = partition_random(g, 4, 43);
  CHECK(a.train_tasks == b.train_tasks);
  CHECK(a.eval_tasks == b.eval_tasks);
  CHECK(a.train_tasks != c.train_tasks);
  CHECK(sorted(concat(a.train_tasks)) == sorted(g.train));
  CHECK(sorted(concat(a.eval_tasks)) == sorted(g.test));
  for (std::size_t k = 0; k + 1 < 4; ++k) {
    const auto diff = static_cast<long>(a.train_tasks[k].size()) - static_cast<long>(a.train_tasks[k + 1].size());
    CHECK((diff == 0 || diff == 1));
  }
}

TEST_CASE("relation partition is deterministic") {
  auto g = synthetic_graph();
  auto a = partition_relation_roundrobin(g, 4);
  auto b = partition_relation_roundrobin(g, 4);
  CHECK(a.train_tasks == b.train_tasks);
  CHECK(a.relation_assignment == b.relation_assignment);
  CHECK(make_partition(g, PartitionStrategy::relation_roundrobin, 4, 1).train_tasks == a.train_tasks);
}

TEST_CASE("strategy names round-trip") {
  for (auto s : {PartitionStrategy::relation_roundrobin, PartitionStrategy::random}) {
    CHECK(parse_partition_strategy(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_partition_strategy("entity"), Error);
}

TEST_CASE("partition manifest lists tasks and relations") {
  auto g = graph_with_frequencies({10, 9, 8, 7, 6, 5, 4, 3}, {0, 1, 2, 3, 4, 5, 6, 7});
  std::ostringstream out;
  write_partition_manifest(out, g, partition_relation_roundrobin(g, 4));
  const auto text = out.str();
  CHECK(text.find("task\trelations\ttrain_triples\teval_triples\n1\t2\t16\t2\n") != std::string::npos);
  CHECK(text.find("1\t0\tr0\t10\n") != std::string::npos);
  CHECK(text.find("4\t7\tr7\t3\n") != std::string::npos);
}
