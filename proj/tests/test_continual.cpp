#include <catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "kgcl/kgcl.hpp"
#include "oracles.hpp"

using namespace kgcl;
using Catch::Approx;

namespace {

TransEModel random_model(std::size_t ne, std::size_t nr, std::size_t d, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.dim = d;
  return init_embeddings(ne, nr, cfg, seed);
}

std::vector<Triple> random_triples(std::size_t n, std::size_t ne, std::size_t nr, Rng& rng) {
  std::vector<Triple> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({static_cast<int>(rng.uniform_index(ne)), static_cast<int>(rng.uniform_index(nr)),
                   static_cast<int>(rng.uniform_index(ne))});
  }
  return out;
}

std::vector<double> flat(const FisherDiagonal& f) {
  std::vector<double> out(f.entities.values().begin(), f.entities.values().end());
  out.insert(out.end(), f.relations.values().begin(), f.relations.values().end());
  return out;
}

FisherDiagonal random_fisher(const TransEModel& m, Rng& rng, double zero_share = 0.3) {
  FisherDiagonal f(m);
  for (auto* t : {&f.entities, &f.relations}) {
    for (std::size_t r = 0; r < t->rows(); ++r) {
      if (rng.uniform01() < zero_share) continue;
      for (double& v : t->row(r)) v = rng.uniform(0.0, 2.0);
    }
  }
  return f;
}

TransEModel perturbed(TransEModel m, Rng& rng, double scale) {
  for (double& v : m.entities.values()) v += rng.uniform(-scale, scale);
  for (double& v : m.relations.values()) v += rng.uniform(-scale, scale);
  return m;
}

// One entity, one relation, d = 1; Fisher 2 on the entity.
struct Scalar {
  TransEModel live;
  std::vector<EwcAnchor> anchors;
};

Scalar scalar_case() {
  auto star = random_model(1, 1, 1, 1);
  star.entities.values()[0] = 1.0;
  star.relations.values()[0] = 0.0;
  FisherDiagonal f(star);
  f.entities.values()[0] = 2.0;
  auto live = star;
  live.entities.values()[0] = 4.0;
  return {live, {EwcAnchor(0, star, f)}};
}

}  // namespace

TEST_CASE("Fisher is zero when no pair has a gradient") {
  // d = 1: entities 0 and 1 sit at 0, the rest far away. Far negatives leave
  // the hinge inactive; near ones sit at distance 0 with zero subgradient.
  auto m = random_model(10, 1, 1, 1);
  m.entities.fill(10.0);
  m.entities.row(0)[0] = 0.0;
  m.entities.row(1)[0] = 0.0;
  m.relations.fill(0.0);
  std::vector<Triple> task{{0, 0, 1}, {1, 0, 0}, {0, 0, 0}, {1, 0, 1}, {0, 0, 1}};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    for (double v : flat(compute_fisher_diagonal(m, task, 2, 1.0, rng))) REQUIRE(v == 0.0);
  }
}

TEST_CASE("one batch: Fisher is the squared batch gradient") {
  auto m = random_model(6, 2, 3, 4);
  Rng data(5);
  auto task = random_triples(5, 6, 2, data);
  Rng a(9), b(9);
  auto f = compute_fisher_diagonal(m, task, 256, 1.0, a);
  std::vector<NegativeSample> batch;
  for (const auto& t : task) batch.push_back(sample_negative(t, 6, b));
  const auto g = oracle::densify(m, loss_gradients(m, batch, 1.0).grads);
  const auto fv = flat(f);
  for (std::size_t k = 0; k < g.size(); ++k) REQUIRE(fv[k] == g[k] * g[k]);
}

TEST_CASE("Fisher matches the brute-force oracle exactly") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    auto m = random_model(5, 2, 4, seed);
    Rng data(seed * 7);
    auto task = random_triples(8, 5, 2, data);
    Rng a = derive_stream(seed, "fisher", 0), b = derive_stream(seed, "fisher", 0);
    const auto f = compute_fisher_diagonal(m, task, 4, 1.0, a);
    const auto expected = oracle::fisher(m, task, 4, 1.0, b);
    REQUIRE(flat(f) == expected);
  }
}

TEST_CASE("Fisher is nonnegative and leaves the model alone") {
  auto m = random_model(30, 4, 5, 3);
  const auto before = m;
  Rng data(1);
  auto task = random_triples(200, 30, 4, data);
  Rng rng(2);
  auto f = compute_fisher_diagonal(m, task, 64, 1.0, rng);
  CHECK(m == before);
  for (double v : flat(f)) {
    REQUIRE(v >= 0.0);
    REQUIRE(std::isfinite(v));
  }
  // rows of relations that never occur stay exactly zero
  std::vector<Triple> only_rel0;
  for (auto t : task) {
    t.relation = 0;
    only_rel0.push_back(t);
  }
  Rng rng2(2);
  auto f0 = compute_fisher_diagonal(m, only_rel0, 64, 1.0, rng2);
  for (std::size_t r = 1; r < 4; ++r) {
    for (double v : f0.relations.row(r)) REQUIRE(v == 0.0);
  }
}

TEST_CASE("Fisher input errors") {
  auto m = random_model(3, 1, 2, 1);
  Rng rng(1);
  CHECK_THROWS_AS(compute_fisher_diagonal(m, {}, 4, 1.0, rng), Error);
  std::vector<Triple> task{{0, 0, 1}};
  CHECK_THROWS_AS(compute_fisher_diagonal(m, task, 0, 1.0, rng), Error);
}

TEST_CASE("penalty and gradient of the scalar case") {
  auto s = scalar_case();
  CHECK(ewc_penalty(s.live, s.anchors, 10.0) == Approx(90.0));
  auto g = ewc_penalty_gradients(s.live, s.anchors, 10.0);
  CHECK(g.entities.find(0)[0] == Approx(60.0));
  CHECK(g.relations.size() == 0);
  CHECK(ewc_penalty(s.live, s.anchors, 0.0) == 0.0);
  CHECK(ewc_penalty_gradients(s.live, s.anchors, 0.0).empty());
  CHECK(ewc_penalty(s.live, {}, 10.0) == 0.0);
}

TEST_CASE("penalty and gradient vanish at the anchor") {
  Rng rng(3);
  auto m = random_model(10, 3, 4, 2);
  std::vector<EwcAnchor> anchors{EwcAnchor(0, m, random_fisher(m, rng))};
  CHECK(ewc_penalty(m, anchors, 10.0) == 0.0);
  auto g = ewc_penalty_gradients(m, anchors, 10.0);
  for (std::size_t k = 0; k < g.entities.size(); ++k) {
    for (double v : g.entities.values_at(k)) REQUIRE(v == 0.0);
  }
}

TEST_CASE("penalty gradient matches finite differences") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto star = random_model(6, 2, 3, 100 + trial);
    std::vector<EwcAnchor> anchors{EwcAnchor(0, star, random_fisher(star, rng)),
                                   EwcAnchor(1, perturbed(star, rng, 0.5), random_fisher(star, rng))};
    auto live = perturbed(star, rng, 0.3);
    std::vector<oracle::Anchor> flat_anchors{oracle::flatten(anchors[0]), oracle::flatten(anchors[1])};
    const double lambda = 1.0 + trial;
    CHECK(ewc_penalty(live, anchors, lambda) == Approx(oracle::total_loss(live, {}, 1.0, flat_anchors, lambda)));
    const auto analytic = oracle::densify(live, ewc_penalty_gradients(live, anchors, lambda));
    const auto fd = oracle::finite_difference(live, {}, 1.0, flat_anchors, lambda);
    REQUIRE(oracle::relative_error(analytic, fd) <= 1e-6);
  }
}

TEST_CASE("penalty is additive over anchors") {
  Rng rng(4);
  auto m = random_model(8, 3, 4, 1);
  EwcAnchor a(0, perturbed(m, rng, 0.2), random_fisher(m, rng));
  EwcAnchor b(1, perturbed(m, rng, 0.2), random_fisher(m, rng));
  std::vector<EwcAnchor> both{a, b}, only_a{a}, only_b{b};
  CHECK(ewc_penalty(m, both, 3.0) == Approx(ewc_penalty(m, only_a, 3.0) + ewc_penalty(m, only_b, 3.0)));
}

TEST_CASE("penalty grows quadratically along a line from the anchor") {
  Rng rng(6);
  auto star = random_model(8, 3, 4, 1);
  std::vector<EwcAnchor> anchors{EwcAnchor(0, star, random_fisher(star, rng))};
  auto end = perturbed(star, rng, 0.5);
  const auto xs = oracle::flatten(star), xe = oracle::flatten(end);
  const double full = ewc_penalty(end, anchors, 2.0);
  REQUIRE(full > 0.0);
  for (double t : {0.25, 0.5, 0.75}) {
    std::vector<double> x(xs.size());
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = xs[k] + t * (xe[k] - xs[k]);
    auto m = star;
    oracle::unflatten(m, x);
    CHECK(ewc_penalty(m, anchors, 2.0) == Approx(t * t * full));
  }
}

TEST_CASE("regularizer aggregates agree with the per-anchor gradient") {
  Rng rng(12);
  auto m = random_model(12, 4, 3, 5);
  EwcRegularizer reg(10.0);
  std::vector<EwcAnchor> anchors;
  for (std::size_t j = 0; j < 3; ++j) {
    anchors.emplace_back(j, perturbed(m, rng, 0.3), random_fisher(m, rng, 0.5));
    reg.add_anchor(anchors.back());
  }
  auto live = perturbed(m, rng, 0.4);
  SparseGradient agg(live);
  reg.add_gradients(live, agg);
  const auto a = oracle::densify(live, agg);
  const auto b = oracle::densify(live, ewc_penalty_gradients(live, anchors, 10.0));
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) REQUIRE(a[k] == Approx(b[k]).margin(1e-12));
  CHECK(reg.penalty(live) == Approx(ewc_penalty(live, anchors, 10.0)));
  CHECK(agg.entities.size() == ewc_penalty_gradients(live, anchors, 10.0).entities.size());
}

TEST_CASE("anchors are snapshots") {
  Rng rng(1);
  auto m = random_model(10, 2, 3, 1);
  const auto f = random_fisher(m, rng);
  EwcAnchor a(0, m, f);
  const auto theta = a.theta_star();
  AdamState adam(m);
  std::vector<Triple> task = random_triples(50, 10, 2, rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  auto streams = TrainStreams::derive(1, 0);
  train_task(m, adam, task, cfg, {}, {}, streams);
  CHECK_FALSE(m == theta);
  CHECK(a.theta_star() == theta);
  CHECK(a.fisher() == f);
}

TEST_CASE("shape mismatches are rejected") {
  Rng rng(1);
  auto m = random_model(10, 2, 3, 1);
  auto other = random_model(11, 2, 3, 1);
  FisherDiagonal wrong(other);
  CHECK_THROWS_AS(EwcAnchor(0, m, wrong), ShapeError);
  std::vector<EwcAnchor> anchors{EwcAnchor(0, other, FisherDiagonal(other))};
  CHECK_THROWS_AS(ewc_penalty(m, anchors, 1.0), ShapeError);
  CHECK_THROWS_AS(ewc_penalty_gradients(m, anchors, 1.0), ShapeError);
  EwcRegularizer reg(1.0);
  reg.add_anchor(EwcAnchor(0, m, FisherDiagonal(m)));
  CHECK_THROWS_AS(reg.add_anchor(anchors[0]), ShapeError);
  CHECK_THROWS_AS(EwcRegularizer(-1.0), Error);
}

TEST_CASE("anchor checkpoint round trip") {
  Rng rng(2);
  auto m = random_model(9, 3, 4, 7);
  EwcAnchor a(2, m, random_fisher(m, rng));
  std::stringstream buf;
  save_anchor(a, buf);
  auto b = load_anchor(buf);
  CHECK(b.task_index() == 2);
  CHECK(b.theta_star() == a.theta_star());
  CHECK(b.fisher() == a.fisher());
  std::stringstream model_buf;
  save_model(m, model_buf);
  CHECK_THROWS_AS(load_anchor(model_buf), Error);
}

TEST_CASE("replay capacity 0 is empty") {
  Rng rng(1);
  std::vector<Triple> task{{0, 0, 1}, {1, 0, 2}};
  for (auto s : {ReplayStrategy::random, ReplayStrategy::wave}) CHECK(build_replay_buffer(task, s, 0, rng).stored.empty());
}

TEST_CASE("small tasks are stored whole") {
  Rng data(1);
  auto task = random_triples(300, 1000, 5, data);
  for (auto s : {ReplayStrategy::random, ReplayStrategy::wave}) {
    Rng rng(2);
    auto buf = build_replay_buffer(task, s, 500, rng);
    REQUIRE(buf.stored.size() == 300);
    auto a = buf.stored, b = task;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("large tasks give exactly 500 distinct stored triples") {
  std::vector<Triple> task;
  for (int i = 0; i < 10000; ++i) task.push_back({i, i % 7, i + 1});
  for (auto s : {ReplayStrategy::random, ReplayStrategy::wave}) {
    for (std::size_t cap : {500u, 498u, 7u}) {
      Rng rng(3);
      auto buf = build_replay_buffer(task, s, cap, rng, 2);
      REQUIRE(buf.stored.size() == cap);
      std::set<Triple> unique(buf.stored.begin(), buf.stored.end());
      CHECK(unique.size() == cap);
      for (const auto& t : buf.stored) REQUIRE(std::binary_search(task.begin(), task.end(), t));
      CHECK(buf.count_for(2) == cap);
      CHECK(buf.count_for(0) == 0);
    }
  }
}

TEST_CASE("wave replay spreads over the task order") {
  std::vector<Triple> task;
  for (int i = 0; i < 10000; ++i) task.push_back({i, 0, i});
  Rng rng(3);
  auto buf = build_replay_buffer(task, ReplayStrategy::wave, 500, rng);
  // every tenth of the training order contributes
  std::vector<int> decile(10, 0);
  for (const auto& t : buf.stored) ++decile[t.head / 1000];
  for (int c : decile) CHECK(c == 50);
}

TEST_CASE("replay sampling is seeded") {
  Rng data(4);
  auto task = random_triples(2000, 500, 5, data);
  Rng a(1), b(1), c(2);
  CHECK(build_replay_buffer(task, ReplayStrategy::random, 100, a).stored ==
        build_replay_buffer(task, ReplayStrategy::random, 100, b).stored);
  Rng a2(1);
  CHECK(build_replay_buffer(task, ReplayStrategy::random, 100, a2).stored !=
        build_replay_buffer(task, ReplayStrategy::random, 100, c).stored);
}

TEST_CASE("buffers merge with their task tags") {
  Rng data(4), rng(5);
  auto t0 = random_triples(50, 100, 3, data);
  auto t1 = random_triples(50, 100, 3, data);
  ReplayBuffer all;
  all.absorb(build_replay_buffer(t0, ReplayStrategy::random, 20, rng, 0));
  all.absorb(build_replay_buffer(t1, ReplayStrategy::wave, 20, rng, 1));
  CHECK(all.stored.size() == 40);
  CHECK(all.count_for(0) == 20);
  CHECK(all.count_for(1) == 20);
  for (std::size_t i = 0; i < all.stored.size(); ++i) {
    const auto& src = all.source_task[i] == 0 ? t0 : t1;
    REQUIRE(std::find(src.begin(), src.end(), all.stored[i]) != src.end());
  }
}
