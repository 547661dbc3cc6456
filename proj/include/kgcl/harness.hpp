#pragma once

// Experiment configuration, the sequential continual-learning run, result
// persistence, seed-grid suites, aggregation and plot-data emission.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "kgcl/continual.hpp"
#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/eval.hpp"
#include "kgcl/optim.hpp"
#include "kgcl/transe.hpp"

namespace kgcl {

using json = nlohmann::json;

inline constexpr std::uint64_t kStandardSeeds[] = {42, 123, 456, 789, 2024};
inline constexpr double kStandardLambdas[] = {0.1, 1.0, 10.0};
// Lambda used by "EWC + wave replay" when none is given.
inline constexpr double kDefaultEwcWaveLambda = 10.0;

enum class MethodKind { naive, ewc, ewc_wave_replay, replay_random, replay_wave };

struct Method {
  MethodKind kind = MethodKind::naive;
  std::optional<double> lambda;

  bool uses_ewc() const noexcept { return kind == MethodKind::ewc || kind == MethodKind::ewc_wave_replay; }
  std::optional<ReplayStrategy> replay() const noexcept {
    switch (kind) {
      case MethodKind::ewc_wave_replay:
      case MethodKind::replay_wave:
        return ReplayStrategy::wave;
      case MethodKind::replay_random:
        return ReplayStrategy::random;
      default:
        return std::nullopt;
    }
  }

  void validate() const {
    if (uses_ewc() != lambda.has_value()) throw Error("lambda must be given exactly when the method uses EWC");
    if (lambda && !(*lambda >= 0.0)) throw Error("lambda must be >= 0");
  }

  friend bool operator==(const Method&, const Method&) = default;
};

// Shortest text that round-trips.
inline std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline std::string_view method_name(MethodKind k) {
  switch (k) {
    case MethodKind::naive: return "naive";
    case MethodKind::ewc: return "ewc";
    case MethodKind::ewc_wave_replay: return "ewc_wave";
    case MethodKind::replay_random: return "replay_random";
    case MethodKind::replay_wave: return "replay_wave";
  }
  return "?";
}

inline MethodKind parse_method_kind(std::string_view s) {
  if (s == "naive") return MethodKind::naive;
  if (s == "ewc") return MethodKind::ewc;
  if (s == "ewc_wave" || s == "ewc_wave_replay" || s == "ewc_plus_wave_replay") return MethodKind::ewc_wave_replay;
  if (s == "replay_random" || s == "random_replay") return MethodKind::replay_random;
  if (s == "replay_wave" || s == "wave_replay") return MethodKind::replay_wave;
  throw Error("unknown method: " + std::string(s));
}

// "ewc(lambda=10)", "naive", ...
inline std::string method_label(const Method& m) {
  std::string out(method_name(m.kind));
  if (m.lambda) out += "(lambda=" + format_number(*m.lambda) + ")";
  return out;
}

// File-name safe form: "ewc_lambda10", "ewc_lambda0.1".
inline std::string method_slug(const Method& m) {
  std::string out(method_name(m.kind));
  if (m.lambda) out += "_lambda" + format_number(*m.lambda);
  return out;
}

// "name" or "name:lambda". Not validated: plain "ewc" still needs a lambda.
inline Method parse_method_token(std::string_view token) {
  Method m;
  const auto colon = token.find(':');
  m.kind = parse_method_kind(detail::trim(token.substr(0, colon)));
  if (colon != std::string_view::npos) {
    m.lambda = std::stod(std::string(detail::trim(token.substr(colon + 1))));
  } else if (m.kind == MethodKind::ewc_wave_replay) {
    m.lambda = kDefaultEwcWaveLambda;
  }
  return m;
}

struct ExperimentConfig {
  std::filesystem::path dataset_dir;
  PartitionStrategy partition = PartitionStrategy::relation_roundrobin;
  std::size_t num_tasks = 4;
  Method method;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 42;
  std::size_t replay_capacity = 500;
  std::size_t fisher_batch_size = 256;
  EvalConfig eval;

  void validate() const {
    if (num_tasks < 2) throw Error("need at least 2 tasks");
    method.validate();
    model.validate();
    if (train.batch_size == 0) throw Error("batch size must be >= 1");
    if (fisher_batch_size == 0) throw Error("Fisher batch size must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Flat key = value configuration.

namespace detail {

inline bool parse_bool(std::string_view v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw Error("not a boolean: " + std::string(v));
}

template <typename T>
T parse_unsigned(std::string_view v, std::string_view key) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw Error("bad value for " + std::string(key) + ": " + std::string(v));
  }
  return out;
}

inline double parse_double(std::string_view v, std::string_view key) {
  std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw Error("bad value for " + std::string(key) + ": " + s);
  return out;
}

inline std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    auto item = trim(v.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace detail

// Applies one key. Unknown keys are errors. Setting "method" resets lambda to
// the method's default (none, or 10 for ewc_wave); set "lambda" afterwards.
inline void apply_config_key(ExperimentConfig& c, std::string_view key, std::string_view value) {
  using namespace detail;
  if (key == "dataset_dir") {
    c.dataset_dir = std::string(value);
  } else if (key == "partition") {
    c.partition = parse_partition_strategy(value);
  } else if (key == "tasks") {
    c.num_tasks = parse_unsigned<std::size_t>(value, key);
  } else if (key == "method") {
    c.method = parse_method_token(value);
  } else if (key == "lambda") {
    if (value == "none" || value.empty()) {
      c.method.lambda.reset();
    } else {
      c.method.lambda = parse_double(value, key);
    }
  } else if (key == "seed") {
    c.seed = parse_unsigned<std::uint64_t>(value, key);
  } else if (key == "dim") {
    c.model.dim = parse_unsigned<std::size_t>(value, key);
  } else if (key == "margin") {
    c.model.margin = parse_double(value, key);
  } else if (key == "normalize_entities") {
    c.model.normalize_entities = parse_bool(value);
  } else if (key == "epochs") {
    c.train.epochs = parse_unsigned<std::size_t>(value, key);
  } else if (key == "batch_size") {
    c.train.batch_size = parse_unsigned<std::size_t>(value, key);
  } else if (key == "lr") {
    c.train.adam.lr = parse_double(value, key);
  } else if (key == "beta1") {
    c.train.adam.beta1 = parse_double(value, key);
  } else if (key == "beta2") {
    c.train.adam.beta2 = parse_double(value, key);
  } else if (key == "eps") {
    c.train.adam.eps = parse_double(value, key);
  } else if (key == "normalize_per_batch") {
    c.train.normalize_per_batch = parse_bool(value);
  } else if (key == "reset_adam") {
    c.train.reset_adam_between_tasks = parse_bool(value);
  } else if (key == "replay_capacity") {
    c.replay_capacity = parse_unsigned<std::size_t>(value, key);
  } else if (key == "fisher_batch_size") {
    c.fisher_batch_size = parse_unsigned<std::size_t>(value, key);
  } else if (key == "eval_sides") {
    if (value == "both") {
      c.eval.sides = RankSides::both;
    } else if (value == "tail") {
      c.eval.sides = RankSides::tail_only;
    } else {
      throw Error("eval_sides must be 'both' or 'tail'");
    }
  } else if (key == "eval_workers") {
    c.eval.workers = parse_unsigned<unsigned>(value, key);
  } else {
    throw Error("unknown config key: " + std::string(key));
  }
}

// Parses "key = value" lines; '#' starts a comment.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view v(line);
    if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
    v = detail::trim(v);
    if (v.empty()) continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos) throw ParseError("config", lineno, "expected key = value");
    out.emplace_back(std::string(detail::trim(v.substr(0, eq))), std::string(detail::trim(v.substr(eq + 1))));
  }
  return out;
}

inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {}) {
  const auto kvs = parse_key_values(in);
  // method before lambda so an explicit lambda wins over the method default.
  for (const auto& [k, v] : kvs) {
    if (k == "method") apply_config_key(base, k, v);
  }
  for (const auto& [k, v] : kvs) {
    if (k != "method") apply_config_key(base, k, v);
  }
  base.validate();
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  return parse_config(in, std::move(base));
}

// Canonical text form. Everything that can change results is included;
// eval_workers is not.
inline std::string config_text(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "dataset_dir = " << c.dataset_dir.string() << '\n'
    << "partition = " << to_string(c.partition) << '\n'
    << "tasks = " << c.num_tasks << '\n'
    << "method = " << method_name(c.method.kind) << '\n'
    << "lambda = " << (c.method.lambda ? format_number(*c.method.lambda) : std::string("none")) << '\n'
    << "seed = " << c.seed << '\n'
    << "dim = " << c.model.dim << '\n'
    << "margin = " << format_number(c.model.margin) << '\n'
    << "normalize_entities = " << (c.model.normalize_entities ? "true" : "false") << '\n'
    << "epochs = " << c.train.epochs << '\n'
    << "batch_size = " << c.train.batch_size << '\n'
    << "lr = " << format_number(c.train.adam.lr) << '\n'
    << "beta1 = " << format_number(c.train.adam.beta1) << '\n'
    << "beta2 = " << format_number(c.train.adam.beta2) << '\n'
    << "eps = " << format_number(c.train.adam.eps) << '\n'
    << "normalize_per_batch = " << (c.train.normalize_per_batch ? "true" : "false") << '\n'
    << "reset_adam = " << (c.train.reset_adam_between_tasks ? "true" : "false") << '\n'
    << "replay_capacity = " << c.replay_capacity << '\n'
    << "fisher_batch_size = " << c.fisher_batch_size << '\n'
    << "eval_sides = " << (c.eval.sides == RankSides::both ? "both" : "tail") << '\n';
  return o.str();
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(config_text(c))));
  return buf;
}

// ---------------------------------------------------------------------------
// Results

struct RunTimings {
  double total_seconds = 0.0;
  std::vector<double> train_seconds;
  std::vector<double> fisher_seconds;
  std::vector<double> eval_seconds;
};

struct ResultsRecord {
  ExperimentConfig config;
  RetentionMatrix retention;
  ForgettingReport forgetting;
  // MRR over the union of all evaluation sets after the last task.
  double final_mrr_pooled = 0.0;
  std::vector<TrainLog> train_logs;
  RunTimings timings;
};

// The per-run forgetting record: method, seed, partition, lambda, per-task
// forgetting, average forgetting (pp) and final MRR.
inline json forgetting_json(const ExperimentConfig& c, const ForgettingReport& r) {
  json j;
  j["method"] = method_label(c.method);
  j["seed"] = c.seed;
  j["partition"] = std::string(to_string(c.partition));
  j["lambda"] = c.method.lambda ? json(*c.method.lambda) : json(nullptr);
  j["per_task_forgetting_pp"] = r.per_task_pp();
  j["average_forgetting_pp"] = r.average_pp();
  j["final_mrr"] = r.final_mrr;
  return j;
}

inline json to_json(const ResultsRecord& rec) {
  json j;
  std::map<std::string, std::string> cfg;
  std::istringstream text(config_text(rec.config));
  for (auto& [k, v] : parse_key_values(text)) cfg[k] = v;
  j["config"] = cfg;
  j["config_hash"] = config_hash(rec.config);
  j["report"] = forgetting_json(rec.config, rec.forgetting);
  j["report"]["final_mrr_pooled"] = rec.final_mrr_pooled;
  json rows = json::array();
  for (std::size_t i = 0; i < rec.retention.num_tasks(); ++i) {
    json row = json::array();
    for (std::size_t k = 0; k <= i; ++k) row.push_back(rec.retention.at(i, k));
    rows.push_back(row);
  }
  j["retention"] = rows;
  json logs = json::array();
  for (const auto& log : rec.train_logs) {
    for (const auto& e : log.epochs) {
      logs.push_back({{"task", e.task + 1}, {"epoch", e.epoch + 1}, {"mean_loss", e.mean_loss},
                      {"wall_seconds", e.wall_seconds}});
    }
  }
  j["train_log"] = logs;
  j["timings"] = {{"total_seconds", rec.timings.total_seconds},
                  {"train_seconds", rec.timings.train_seconds},
                  {"fisher_seconds", rec.timings.fisher_seconds},
                  {"eval_seconds", rec.timings.eval_seconds}};
  return j;
}

inline ResultsRecord record_from_json(const json& j) {
  ResultsRecord rec;
  std::ostringstream text;
  for (const auto& [k, v] : j.at("config").items()) text << k << " = " << v.get<std::string>() << '\n';
  std::istringstream in(text.str());
  rec.config = parse_config(in);

  const auto& rows = j.at("retention");
  rec.retention = RetentionMatrix(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < rows[i].size(); ++k) rec.retention.set(i, k, rows[i][k].get<double>());
  }
  rec.forgetting = forgetting_report(rec.retention);
  rec.final_mrr_pooled = j.at("report").value("final_mrr_pooled", 0.0);
  if (j.contains("train_log")) {
    for (const auto& e : j["train_log"]) {
      const auto task = e.at("task").get<std::size_t>() - 1;
      if (rec.train_logs.size() <= task) rec.train_logs.resize(task + 1);
      rec.train_logs[task].epochs.push_back({task, e.at("epoch").get<std::size_t>() - 1,
                                             e.at("mean_loss").get<double>(), e.at("wall_seconds").get<double>()});
    }
  }
  if (j.contains("timings")) rec.timings.total_seconds = j["timings"].value("total_seconds", 0.0);
  return rec;
}

// Where a run may save model and anchor checkpoints; empty means none.
struct RunOptions {
  std::filesystem::path checkpoint_dir;
};

// One sequential continual-learning run over a loaded graph.
inline ResultsRecord run_experiment(const ExperimentConfig& config, const KnowledgeGraph& graph,
                                    const FilterIndex& filter, const RunOptions& options = {}) {
  using clock = std::chrono::steady_clock;
  auto seconds_since = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };
  config.validate();
  const auto start = clock::now();

  ResultsRecord rec;
  rec.config = config;
  const TaskPartition partition = make_partition(graph, config.partition, config.num_tasks, config.seed);
  for (std::size_t k = 0; k < partition.num_tasks; ++k) {
    if (partition.train_tasks[k].empty()) throw Error("task " + std::to_string(k + 1) + " has no training triples");
    if (partition.eval_tasks[k].empty()) throw Error("task " + std::to_string(k + 1) + " has no evaluation triples");
  }

  TransEModel model = init_embeddings(graph.num_entities(), graph.num_relations(), config.model, config.seed);
  AdamState adam(model, config.train.adam);
  std::optional<EwcRegularizer> ewc;
  if (config.method.uses_ewc()) ewc.emplace(*config.method.lambda);
  const auto replay_strategy = config.method.replay();
  ReplayBuffer replay;
  rec.retention = RetentionMatrix(partition.num_tasks);

  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  for (std::size_t k = 0; k < partition.num_tasks; ++k) {
    if (k > 0 && config.train.reset_adam_between_tasks) adam.reset();
    const auto& task = partition.train_tasks[k];

    auto t = clock::now();
    TrainStreams streams = TrainStreams::derive(config.seed, k);
    const PenaltyHook hook = ewc ? ewc->hook() : PenaltyHook{};
    rec.train_logs.push_back(train_task(model, adam, task, config.train, hook, replay.stored, streams, k));
    rec.timings.train_seconds.push_back(seconds_since(t));

    const bool more_tasks = k + 1 < partition.num_tasks;
    t = clock::now();
    if (ewc && more_tasks) {
      Rng fisher_rng = derive_stream(config.seed, "fisher", k);
      FisherDiagonal fisher = compute_fisher_diagonal(model, task, config.fisher_batch_size, model.config.margin, fisher_rng);
      ewc->add_anchor(EwcAnchor(k, model, std::move(fisher)));
      if (!options.checkpoint_dir.empty()) {
        std::ofstream out(options.checkpoint_dir / ("anchor_task" + std::to_string(k + 1) + ".ckpt"), std::ios::binary);
        save_anchor(ewc->anchors().back(), out);
      }
    }
    rec.timings.fisher_seconds.push_back(seconds_since(t));
    if (replay_strategy && more_tasks) {
      Rng replay_rng = derive_stream(config.seed, "replay", k);
      replay.absorb(build_replay_buffer(task, *replay_strategy, config.replay_capacity, replay_rng, k));
    }
    if (!options.checkpoint_dir.empty()) {
      save_model(model, options.checkpoint_dir / ("model_task" + std::to_string(k + 1) + ".ckpt"));
    }

    t = clock::now();
    retention_update(rec.retention, k, model, partition, filter, config.eval);
    rec.timings.eval_seconds.push_back(seconds_since(t));
  }

  rec.forgetting = forgetting_report(rec.retention);
  const std::size_t last = partition.num_tasks - 1;
  double weighted = 0.0;
  std::size_t total = 0;
  for (std::size_t j = 0; j <= last; ++j) {
    weighted += rec.retention.at(last, j) * static_cast<double>(partition.eval_tasks[j].size());
    total += partition.eval_tasks[j].size();
  }
  rec.final_mrr_pooled = weighted / static_cast<double>(total);
  rec.timings.total_seconds = seconds_since(start);
  return rec;
}

inline ResultsRecord run_experiment(const ExperimentConfig& config, const RunOptions& options = {}) {
  const KnowledgeGraph graph = load_dataset(config.dataset_dir);
  const FilterIndex filter(graph);
  return run_experiment(config, graph, filter, options);
}

// Writes runs/<hash>.json and runs/<hash>.config and appends one line to
// results.csv. Returns the JSON path.
inline std::filesystem::path store_record(const std::filesystem::path& output_dir, const ResultsRecord& rec) {
  namespace fs = std::filesystem;
  const fs::path runs = output_dir / "runs";
  fs::create_directories(runs);
  const std::string hash = config_hash(rec.config);
  {
    std::ofstream cfg(runs / (hash + ".config"));
    cfg << config_text(rec.config);
  }
  const fs::path json_path = runs / (hash + ".json");
  {
    std::ofstream out(json_path);
    out << to_json(rec).dump(2) << '\n';
  }
  const fs::path csv = output_dir / "results.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream out(csv, std::ios::app);
  if (fresh) out << "config_hash,method,partition,lambda,seed,forgetting_pp,final_mrr,final_mrr_pooled,total_seconds\n";
  out << hash << ',' << method_label(rec.config.method) << ',' << to_string(rec.config.partition) << ','
      << (rec.config.method.lambda ? format_number(*rec.config.method.lambda) : "") << ',' << rec.config.seed << ','
      << format_number(rec.forgetting.average_pp()) << ',' << format_number(rec.forgetting.final_mrr) << ','
      << format_number(rec.final_mrr_pooled) << ',' << rec.timings.total_seconds << '\n';
  return json_path;
}

inline std::vector<ResultsRecord> load_records(const std::filesystem::path& output_dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::exists(output_dir / "runs")) {
    for (const auto& e : fs::directory_iterator(output_dir / "runs")) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<ResultsRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    out.push_back(record_from_json(json::parse(in)));
  }
  return out;
}

inline void write_failure(const std::filesystem::path& output_dir, const ExperimentConfig& c, const std::string& what) {
  std::filesystem::create_directories(output_dir / "failures");
  json j{{"config_hash", config_hash(c)}, {"config", config_text(c)}, {"error", what}};
  std::ofstream out(output_dir / "failures" / (config_hash(c) + ".json"));
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Suites and aggregation

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd out;
  if (xs.empty()) return out;
  double s = 0.0;
  for (double x : xs) s += x;
  out.mean = s / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return out;
}

struct SummaryRow {
  Method method;
  PartitionStrategy partition = PartitionStrategy::relation_roundrobin;
  std::vector<std::uint64_t> seeds;
  MeanStd forgetting_pp;
  MeanStd final_mrr;
  MeanStd final_mrr_pooled;
  // Seed-mean retention matrix; lower triangle only.
  std::vector<std::vector<double>> retention;
};

struct SuiteFailure {
  ExperimentConfig config;
  std::string error;
};

struct SuiteSummary {
  std::vector<ResultsRecord> records;
  std::vector<SuiteFailure> failures;
  std::vector<SummaryRow> rows;

  const SummaryRow* find(const Method& m, PartitionStrategy p) const {
    for (const auto& r : rows) {
      if (r.method == m && r.partition == p) return &r;
    }
    return nullptr;
  }
};

// Groups records by (method, partition) in first-seen order.
inline std::vector<SummaryRow> aggregate(std::span<const ResultsRecord> records) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<const ResultsRecord*>> members;
  for (const auto& rec : records) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& r) {
      return r.method == rec.config.method && r.partition == rec.config.partition;
    });
    if (it == rows.end()) {
      rows.push_back({rec.config.method, rec.config.partition, {}, {}, {}, {}, {}});
      members.emplace_back();
      it = rows.end() - 1;
    }
    members[static_cast<std::size_t>(it - rows.begin())].push_back(&rec);
  }
  for (std::size_t g = 0; g < rows.size(); ++g) {
    std::vector<double> f, mrr_mean, mrr_pooled;
    for (const auto* rec : members[g]) {
      rows[g].seeds.push_back(rec->config.seed);
      f.push_back(rec->forgetting.average_pp());
      mrr_mean.push_back(rec->forgetting.final_mrr);
      mrr_pooled.push_back(rec->final_mrr_pooled);
    }
    rows[g].forgetting_pp = mean_std(f);
    rows[g].final_mrr = mean_std(mrr_mean);
    rows[g].final_mrr_pooled = mean_std(mrr_pooled);
    const std::size_t n = members[g].front()->retention.num_tasks();
    rows[g].retention.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
      rows[g].retention[i].assign(i + 1, 0.0);
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        std::size_t count = 0;
        for (const auto* rec : members[g]) {
          if (auto v = rec->retention.get(i, j)) {
            s += *v;
            ++count;
          }
        }
        rows[g].retention[i][j] = count ? s / static_cast<double>(count) : 0.0;
      }
    }
  }
  return rows;
}

// The reference method grid: naive, EWC at each lambda, EWC + wave replay
// at lambda 10 and 1, and the two replay-only baselines.
inline std::vector<Method> standard_methods() {
  return {
      {MethodKind::naive, std::nullopt},
      {MethodKind::ewc, 0.1},
      {MethodKind::ewc, 1.0},
      {MethodKind::ewc, 10.0},
      {MethodKind::ewc_wave_replay, 10.0},
      {MethodKind::ewc_wave_replay, 1.0},
      {MethodKind::replay_random, std::nullopt},
      {MethodKind::replay_wave, std::nullopt},
  };
}

// Cartesian product partitions x methods x seeds over a base config.
inline std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, std::span<const PartitionStrategy> partitions,
                                                 std::span<const Method> methods, std::span<const std::uint64_t> seeds) {
  std::vector<ExperimentConfig> out;
  for (auto p : partitions) {
    for (const auto& m : methods) {
      for (auto s : seeds) {
        ExperimentConfig c = base;
        c.partition = p;
        c.method = m;
        c.seed = s;
        c.validate();
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

// Grid file: single-valued keys as in a run config, plus the list keys
// "partitions", "methods" (name or name:lambda, or "standard"), "seeds".
inline std::vector<ExperimentConfig> parse_grid(std::istream& in, ExperimentConfig base = {}) {
  std::vector<PartitionStrategy> partitions{base.partition};
  std::vector<Method> methods{base.method};
  std::vector<std::uint64_t> seeds{base.seed};
  for (const auto& [k, v] : parse_key_values(in)) {
    if (k == "partitions") {
      partitions.clear();
      for (const auto& p : detail::split_list(v)) partitions.push_back(parse_partition_strategy(p));
    } else if (k == "methods") {
      methods.clear();
      for (const auto& m : detail::split_list(v)) {
        if (m == "standard") {
          auto pm = standard_methods();
          methods.insert(methods.end(), pm.begin(), pm.end());
        } else {
          methods.push_back(parse_method_token(m));
          methods.back().validate();
        }
      }
    } else if (k == "seeds") {
      seeds.clear();
      for (const auto& s : detail::split_list(v)) seeds.push_back(detail::parse_unsigned<std::uint64_t>(s, k));
    } else if (k == "method" || k == "lambda" || k == "seed" || k == "partition") {
      throw Error("grid files use 'methods', 'seeds' and 'partitions' lists; got '" + k + "'");
    } else {
      apply_config_key(base, k, v);
    }
  }
  if (partitions.empty() || methods.empty() || seeds.empty()) throw Error("grid is empty");
  return expand_grid(base, partitions, methods, seeds);
}

struct SuiteOptions {
  unsigned workers = 1;
  // When set, each finished record (or failure) is persisted here.
  std::optional<std::filesystem::path> output_dir;
  // Skip configs whose record already exists in output_dir.
  bool resume = false;
};

// Runs every config, sharing each dataset between runs. Failures are
// collected and the suite keeps going.
inline SuiteSummary run_suite(std::span<const ExperimentConfig> grid, const SuiteOptions& options = {}) {
  if (grid.empty()) throw Error("empty grid");
  struct Loaded {
    KnowledgeGraph graph;
    FilterIndex filter;
  };
  std::map<std::filesystem::path, std::shared_ptr<const Loaded>> datasets;
  std::map<std::filesystem::path, std::string> load_errors;
  for (const auto& c : grid) {
    if (datasets.contains(c.dataset_dir) || load_errors.contains(c.dataset_dir)) continue;
    try {
      auto l = std::make_shared<Loaded>();
      l->graph = load_dataset(c.dataset_dir);
      l->filter = FilterIndex(l->graph);
      datasets.emplace(c.dataset_dir, std::move(l));
    } catch (const std::exception& e) {
      load_errors.emplace(c.dataset_dir, e.what());
    }
  }

  std::vector<std::optional<ResultsRecord>> results(grid.size());
  std::vector<std::optional<std::string>> errors(grid.size());
  std::atomic<std::size_t> next{0};
  std::mutex store_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      const auto& c = grid[i];
      try {
        if (auto err = load_errors.find(c.dataset_dir); err != load_errors.end()) throw Error(err->second);
        if (options.resume && options.output_dir) {
          const auto existing = *options.output_dir / "runs" / (config_hash(c) + ".json");
          if (std::filesystem::exists(existing)) {
            std::ifstream in(existing);
            results[i] = record_from_json(json::parse(in));
            continue;
          }
        }
        const auto& data = *datasets.at(c.dataset_dir);
        results[i] = run_experiment(c, data.graph, data.filter);
        if (options.output_dir) {
          std::lock_guard lock(store_mutex);
          store_record(*options.output_dir, *results[i]);
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
        if (options.output_dir) {
          std::lock_guard lock(store_mutex);
          write_failure(*options.output_dir, c, e.what());
        }
      }
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, static_cast<unsigned>(grid.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  SuiteSummary summary;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (results[i]) {
      summary.records.push_back(std::move(*results[i]));
    } else {
      summary.failures.push_back({grid[i], errors[i].value_or("unknown failure")});
    }
  }
  summary.rows = aggregate(summary.records);
  return summary;
}

// ---------------------------------------------------------------------------
// Summary tables and plot data

inline void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
  out << "method,partition,lambda,n,forgetting_pp_mean,forgetting_pp_std,final_mrr_mean,final_mrr_std,"
         "final_mrr_pooled_mean,final_mrr_pooled_std\n";
  for (const auto& r : rows) {
    out << method_label(r.method) << ',' << to_string(r.partition) << ','
        << (r.method.lambda ? format_number(*r.method.lambda) : "") << ',' << r.seeds.size() << ','
        << r.forgetting_pp.mean << ',' << r.forgetting_pp.stddev << ',' << r.final_mrr.mean << ','
        << r.final_mrr.stddev << ',' << r.final_mrr_pooled.mean << ',' << r.final_mrr_pooled.stddev << '\n';
  }
}

namespace detail {

inline std::string pm(const MeanStd& v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f ± %.*f", digits, v.mean, digits, v.stddev);
  return buf;
}

}  // namespace detail

// Markdown tables: per-partition method tables, the partition comparison for
// naive and EWC(lambda=10), and the lambda sweep.
inline void write_summary_markdown(std::ostream& out, const SuiteSummary& s) {
  for (auto part : {PartitionStrategy::relation_roundrobin, PartitionStrategy::random}) {
    bool any = false;
    for (const auto& r : s.rows) any |= r.partition == part;
    if (!any) continue;
    out << "## " << (part == PartitionStrategy::relation_roundrobin ? "Relation-based" : "Random")
        << " partitioning\n\n| Method | Forgetting (%) | Final MRR | n |\n|---|---|---|---|\n";
    for (const auto& r : s.rows) {
      if (r.partition != part) continue;
      out << "| " << method_label(r.method) << " | " << detail::pm(r.forgetting_pp, 2) << " | "
          << detail::pm(r.final_mrr, 3) << " | " << r.seeds.size() << " |\n";
    }
    out << '\n';
  }

  const Method naive{MethodKind::naive, std::nullopt};
  const Method ewc10{MethodKind::ewc, 10.0};
  const auto* nr = s.find(naive, PartitionStrategy::relation_roundrobin);
  const auto* nx = s.find(naive, PartitionStrategy::random);
  const auto* er = s.find(ewc10, PartitionStrategy::relation_roundrobin);
  const auto* ex = s.find(ewc10, PartitionStrategy::random);
  if (nr && nx && er && ex) {
    char buf[64];
    out << "## Partitioning effect\n\n| Partitioning | Naive Forgetting (%) | EWC (lambda=10) Forgetting (%) |\n"
           "|---|---|---|\n";
    out << "| Relation-based | " << detail::pm(nr->forgetting_pp, 2) << " | " << detail::pm(er->forgetting_pp, 2) << " |\n";
    out << "| Random | " << detail::pm(nx->forgetting_pp, 2) << " | " << detail::pm(ex->forgetting_pp, 2) << " |\n";
    std::snprintf(buf, sizeof(buf), "| Difference | %.2f pp | %.2f pp |\n\n",
                  nr->forgetting_pp.mean - nx->forgetting_pp.mean, er->forgetting_pp.mean - ex->forgetting_pp.mean);
    out << buf;
  }

  bool sweep = false;
  for (double l : kStandardLambdas) {
    for (auto part : {PartitionStrategy::relation_roundrobin, PartitionStrategy::random}) {
      sweep |= s.find({MethodKind::ewc, l}, part) != nullptr;
    }
  }
  if (sweep) {
    out << "## Lambda sweep\n\n| Partitioning | lambda | Forgetting (%) | Final MRR |\n|---|---|---|---|\n";
    for (auto part : {PartitionStrategy::relation_roundrobin, PartitionStrategy::random}) {
      for (double l : kStandardLambdas) {
        const auto* r = s.find({MethodKind::ewc, l}, part);
        if (!r) continue;
        out << "| " << (part == PartitionStrategy::relation_roundrobin ? "Relation-based" : "Random") << " | "
            << format_number(l) << " | " << detail::pm(r->forgetting_pp, 2) << " | " << detail::pm(r->final_mrr, 3)
            << " |\n";
      }
    }
    out << '\n';
  }
  if (!s.failures.empty()) {
    out << "## Failures\n\n";
    for (const auto& f : s.failures) {
      out << "- " << method_label(f.config.method) << " / " << to_string(f.config.partition) << " / seed "
          << f.config.seed << ": " << f.error << '\n';
    }
  }
}

// Writes the plot-data CSVs into dir and returns the paths written:
//   forgetting_by_method.csv   method,partition,lambda,forgetting_pp_mean,forgetting_pp_std,n
//   partition_comparison.csv   method,lambda,relation_forgetting_pp_mean,relation_forgetting_pp_std,
//                              random_forgetting_pp_mean,random_forgetting_pp_std,difference_pp
//   tradeoff_scatter.csv       method,partition,lambda,forgetting_pp,final_mrr,forgetting_pp_std,final_mrr_std
//   retention_<method>_<partition>.csv   seed-mean retention matrix (after_task,task_1..task_T)
inline std::vector<std::filesystem::path> emit_plot_data(std::span<const SummaryRow> rows,
                                                         const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (rows.empty()) throw Error("no summary rows to plot");
  fs::create_directories(dir);
  std::vector<fs::path> written;
  auto lambda_str = [](const Method& m) { return m.lambda ? format_number(*m.lambda) : std::string(); };

  {
    const auto p = dir / "forgetting_by_method.csv";
    std::ofstream out(p);
    out << "method,partition,lambda,forgetting_pp_mean,forgetting_pp_std,n\n";
    for (const auto& r : rows) {
      out << method_label(r.method) << ',' << to_string(r.partition) << ',' << lambda_str(r.method) << ','
          << r.forgetting_pp.mean << ',' << r.forgetting_pp.stddev << ',' << r.seeds.size() << '\n';
    }
    written.push_back(p);
  }
  {
    const auto p = dir / "partition_comparison.csv";
    std::ofstream out(p);
    out << "method,lambda,relation_forgetting_pp_mean,relation_forgetting_pp_std,random_forgetting_pp_mean,"
           "random_forgetting_pp_std,difference_pp\n";
    for (const auto& r : rows) {
      if (r.partition != PartitionStrategy::relation_roundrobin) continue;
      auto other = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& x) {
        return x.method == r.method && x.partition == PartitionStrategy::random;
      });
      if (other == rows.end()) continue;
      out << method_label(r.method) << ',' << lambda_str(r.method) << ',' << r.forgetting_pp.mean << ','
          << r.forgetting_pp.stddev << ',' << other->forgetting_pp.mean << ',' << other->forgetting_pp.stddev << ','
          << r.forgetting_pp.mean - other->forgetting_pp.mean << '\n';
    }
    written.push_back(p);
  }
  {
    const auto p = dir / "tradeoff_scatter.csv";
    std::ofstream out(p);
    out << "method,partition,lambda,forgetting_pp,final_mrr,forgetting_pp_std,final_mrr_std\n";
    for (const auto& r : rows) {
      out << method_label(r.method) << ',' << to_string(r.partition) << ',' << lambda_str(r.method) << ','
          << r.forgetting_pp.mean << ',' << r.final_mrr.mean << ',' << r.forgetting_pp.stddev << ','
          << r.final_mrr.stddev << '\n';
    }
    written.push_back(p);
  }
  for (const auto& r : rows) {
    const auto p = dir / ("retention_" + method_slug(r.method) + "_" + std::string(to_string(r.partition)) + ".csv");
    std::ofstream out(p);
    const std::size_t n = r.retention.size();
    out << "after_task";
    for (std::size_t j = 0; j < n; ++j) out << ",task_" << j + 1;
    out << '\n';
    for (std::size_t i = 0; i < n; ++i) {
      out << i + 1;
      for (std::size_t j = 0; j < n; ++j) {
        out << ',';
        if (j <= i) out << r.retention[i][j];
      }
      out << '\n';
    }
    written.push_back(p);
  }
  return written;
}

}  // namespace kgcl
