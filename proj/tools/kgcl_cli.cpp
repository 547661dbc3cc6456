// kgcl: run continual-learning experiments on knowledge-graph embeddings.
//
//   kgcl run             one experiment (config file and/or flags)
//   kgcl suite           a grid of experiments, then summary and plot data
//   kgcl report          re-aggregate stored runs into summary and plot data
//   kgcl partition-audit dump a task partition manifest
//   kgcl synth           write a synthetic dataset

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kgcl/kgcl.hpp"

namespace fs = std::filesystem;

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

// Flags shared by `run` and `suite`; each set flag becomes a config override.
struct CommonFlags {
  std::string config_file;
  std::string dataset = env_or("KGCL_DATA_DIR", "");
  std::string output = env_or("KGCL_OUTPUT_DIR", "results");
  std::vector<std::string> sets;
  std::string tasks, epochs, batch_size, dim, eval_workers;

  void add(CLI::App* app) {
    app->add_option("-c,--config", config_file, "Key = value config file");
    app->add_option("-d,--dataset", dataset, "Dataset directory with train.txt/valid.txt/test.txt (env KGCL_DATA_DIR)");
    app->add_option("-o,--output", output, "Output directory (env KGCL_OUTPUT_DIR)");
    app->add_option("-T,--tasks", tasks, "Number of tasks");
    app->add_option("--epochs", epochs, "Epochs per task");
    app->add_option("--batch-size", batch_size, "Mini-batch size");
    app->add_option("--dim", dim, "Embedding dimension");
    app->add_option("--eval-workers", eval_workers, "Threads used for ranking inside one run");
    app->add_option("--set", sets, "Extra override key=value (repeatable)");
  }

  std::vector<std::pair<std::string, std::string>> overrides() const {
    std::vector<std::pair<std::string, std::string>> out;
    if (!dataset.empty()) out.emplace_back("dataset_dir", dataset);
    if (!tasks.empty()) out.emplace_back("tasks", tasks);
    if (!epochs.empty()) out.emplace_back("epochs", epochs);
    if (!batch_size.empty()) out.emplace_back("batch_size", batch_size);
    if (!dim.empty()) out.emplace_back("dim", dim);
    if (!eval_workers.empty()) out.emplace_back("eval_workers", eval_workers);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw kgcl::Error("--set expects key=value, got " + s);
      out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    return out;
  }
};

void write_summary(const kgcl::SuiteSummary& summary, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "summary.csv");
    kgcl::write_summary_csv(csv, summary.rows);
  }
  {
    std::ofstream md(out_dir / "summary.md");
    kgcl::write_summary_markdown(md, summary);
  }
  if (!summary.rows.empty()) {
    for (const auto& p : kgcl::emit_plot_data(summary.rows, out_dir / "plots")) std::cout << "wrote " << p.string() << '\n';
  }
  kgcl::write_summary_markdown(std::cout, summary);
}

int cmd_run(const CommonFlags& flags, const std::string& method, const std::string& lambda,
            const std::string& partition, const std::string& seed, bool save_checkpoints) {
  kgcl::ExperimentConfig cfg;
  std::vector<std::pair<std::string, std::string>> kv;
  if (!flags.config_file.empty()) {
    std::ifstream in(flags.config_file);
    if (!in) throw kgcl::Error("cannot open " + flags.config_file);
    kv = kgcl::parse_key_values(in);
  }
  if (!method.empty()) kv.emplace_back("method", method);
  if (!lambda.empty()) kv.emplace_back("lambda", lambda);
  if (!partition.empty()) kv.emplace_back("partition", partition);
  if (!seed.empty()) kv.emplace_back("seed", seed);
  for (auto& o : flags.overrides()) kv.push_back(std::move(o));
  for (const auto& [k, v] : kv) {
    if (k == "method") kgcl::apply_config_key(cfg, k, v);
  }
  for (const auto& [k, v] : kv) {
    if (k != "method") kgcl::apply_config_key(cfg, k, v);
  }
  cfg.validate();
  if (cfg.dataset_dir.empty()) throw kgcl::Error("no dataset directory (use --dataset or KGCL_DATA_DIR)");

  const fs::path out_dir = flags.output;
  kgcl::RunOptions options;
  if (save_checkpoints) options.checkpoint_dir = out_dir / "checkpoints" / kgcl::config_hash(cfg);
  std::cout << kgcl::config_text(cfg) << std::flush;
  try {
    const auto rec = kgcl::run_experiment(cfg, options);
    const auto path = kgcl::store_record(out_dir, rec);
    {
      std::ofstream log(out_dir / "runs" / (kgcl::config_hash(cfg) + ".trainlog.csv"));
      kgcl::write_train_log_csv(log, rec.train_logs);
    }
    {
      std::ofstream ret(out_dir / "runs" / (kgcl::config_hash(cfg) + ".retention.csv"));
      kgcl::write_retention_csv(ret, rec.retention);
    }
    kgcl::write_retention_csv(std::cout, rec.retention);
    std::cout << kgcl::forgetting_json(cfg, rec.forgetting).dump(2) << '\n';
    std::cout << "wrote " << path.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    kgcl::write_failure(out_dir, cfg, e.what());
    throw;
  }
}

int cmd_suite(const CommonFlags& flags, const std::string& grid_file, const std::vector<std::string>& methods,
              const std::vector<std::string>& partitions, const std::vector<std::uint64_t>& seeds, unsigned workers,
              bool resume) {
  std::ostringstream grid;
  if (!grid_file.empty()) {
    std::ifstream in(grid_file);
    if (!in) throw kgcl::Error("cannot open " + grid_file);
    grid << in.rdbuf() << '\n';
  }
  if (!flags.config_file.empty()) {
    std::ifstream in(flags.config_file);
    grid << in.rdbuf() << '\n';
  }
  auto join = [](const auto& xs) {
    std::ostringstream o;
    for (std::size_t i = 0; i < xs.size(); ++i) o << (i ? "," : "") << xs[i];
    return o.str();
  };
  if (!methods.empty()) grid << "methods = " << join(methods) << '\n';
  if (!partitions.empty()) grid << "partitions = " << join(partitions) << '\n';
  if (!seeds.empty()) grid << "seeds = " << join(seeds) << '\n';
  for (const auto& [k, v] : flags.overrides()) grid << k << " = " << v << '\n';

  std::istringstream in(grid.str());
  const auto configs = kgcl::parse_grid(in);
  std::cout << "suite: " << configs.size() << " runs, " << workers << " worker(s)\n" << std::flush;
  kgcl::SuiteOptions options;
  options.workers = workers;
  options.output_dir = fs::path(flags.output);
  options.resume = resume;
  const auto summary = kgcl::run_suite(configs, options);
  write_summary(summary, flags.output);
  std::cout << summary.records.size() << " succeeded, " << summary.failures.size() << " failed\n";
  return summary.failures.empty() ? 0 : 1;
}

int cmd_report(const std::string& output) {
  kgcl::SuiteSummary summary;
  summary.records = kgcl::load_records(output);
  if (summary.records.empty()) throw kgcl::Error("no stored runs under " + output);
  summary.rows = kgcl::aggregate(summary.records);
  write_summary(summary, output);
  return 0;
}

int cmd_partition_audit(const std::string& dataset, const std::string& partition, std::size_t tasks,
                        std::uint64_t seed, const std::string& out_file) {
  if (dataset.empty()) throw kgcl::Error("no dataset directory (use --dataset or KGCL_DATA_DIR)");
  const auto graph = kgcl::load_dataset(dataset);
  std::cerr << "entities " << graph.num_entities() << " (train-only " << graph.train_entity_count << "), relations "
            << graph.num_relations() << ", train " << graph.train.size() << " (duplicates dropped "
            << graph.duplicate_train_triples << "), valid " << graph.valid.size() << ", test " << graph.test.size()
            << '\n';
  const auto p = kgcl::make_partition(graph, kgcl::parse_partition_strategy(partition), tasks, seed);
  if (out_file.empty() || out_file == "-") {
    kgcl::write_partition_manifest(std::cout, graph, p);
  } else {
    std::ofstream out(out_file);
    kgcl::write_partition_manifest(out, graph, p);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning for knowledge-graph embeddings (TransE, EWC, replay)"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  std::string method, lambda, partition, seed;
  bool save_checkpoints = false;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run_flags.add(run);
  run->add_option("-m,--method", method, "naive | ewc | ewc_wave | replay_random | replay_wave (name:lambda allowed)");
  run->add_option("-l,--lambda", lambda, "EWC regularization strength");
  run->add_option("-p,--partition", partition, "relation | random");
  run->add_option("-s,--seed", seed, "Master seed");
  run->add_flag("--save-checkpoints", save_checkpoints, "Write model and anchor checkpoints after every task");

  CommonFlags suite_flags;
  std::string grid_file;
  std::vector<std::string> methods, partitions;
  std::vector<std::uint64_t> seeds;
  unsigned workers = 1;
  bool resume = false;
  auto* suite = app.add_subcommand("suite", "Run a grid of experiments");
  suite_flags.add(suite);
  suite->add_option("-g,--grid", grid_file, "Grid file (key = value, list keys methods/partitions/seeds)");
  suite->add_option("--methods", methods, "Methods (name or name:lambda, or 'standard')")->delimiter(',');
  suite->add_option("--partitions", partitions, "Partitions")->delimiter(',');
  suite->add_option("--seeds", seeds, "Seed list")->delimiter(',');
  suite->add_option("-w,--workers", workers, "Concurrent experiments");
  suite->add_flag("--resume", resume, "Reuse runs already stored in the output directory");

  std::string report_dir = env_or("KGCL_OUTPUT_DIR", "results");
  auto* report = app.add_subcommand("report", "Aggregate stored runs and emit plot data");
  report->add_option("-o,--output", report_dir, "Output directory holding runs/");

  std::string audit_dataset = env_or("KGCL_DATA_DIR", "");
  std::string audit_partition = "relation";
  std::size_t audit_tasks = 4;
  std::uint64_t audit_seed = 42;
  std::string audit_out;
  auto* audit = app.add_subcommand("partition-audit", "Print the task partition manifest");
  audit->add_option("-d,--dataset", audit_dataset, "Dataset directory");
  audit->add_option("-p,--partition", audit_partition, "relation | random");
  audit->add_option("-T,--tasks", audit_tasks, "Number of tasks");
  audit->add_option("-s,--seed", audit_seed, "Seed (random partitioning)");
  audit->add_option("--out", audit_out, "Manifest file (default stdout)");

  kgcl::SyntheticSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--out", synth_out, "Target directory")->required();
  synth->add_option("--entities", synth_spec.entities);
  synth->add_option("--relations", synth_spec.relations);
  synth->add_option("--types", synth_spec.types);
  synth->add_option("--triples", synth_spec.triples);
  synth->add_option("--fanout", synth_spec.fanout);
  synth->add_option("--noise", synth_spec.noise);
  synth->add_option("--seed", synth_spec.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_flags, method, lambda, partition, seed, save_checkpoints);
    if (*suite) return cmd_suite(suite_flags, grid_file, methods, partitions, seeds, workers, resume);
    if (*report) return cmd_report(report_dir);
    if (*audit) return cmd_partition_audit(audit_dataset, audit_partition, audit_tasks, audit_seed, audit_out);
    if (*synth) {
      const auto splits = kgcl::generate_synthetic(synth_spec);
      kgcl::write_dataset(synth_out, splits);
      std::cout << "wrote " << synth_out << ": train " << splits.train.size() << ", valid " << splits.valid.size()
                << ", test " << splits.test.size() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
