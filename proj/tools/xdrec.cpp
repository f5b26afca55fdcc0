#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "xdrec/errors.hpp"
#include "xdrec/harness.hpp"

namespace fs = std::filesystem;
using namespace xdrec;

namespace {

std::string read_all(const std::string& path) {
  if (path == "-") {
    std::stringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void print_stages(const std::vector<StageCounts>& stages) {
  fmt::print("{:<16} {:<8} {:>8} {:>8} {:>12}\n", "stage", "domain", "users", "items",
             "interactions");
  for (const auto& s : stages) {
    fmt::print("{:<16} {:<8} {:>8} {:>8} {:>12}\n", s.stage, s.domain, s.users, s.items,
               s.interactions);
  }
}

void write_stages_csv(const std::vector<StageCounts>& stages, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "stage,domain,users,items,interactions\n";
  for (const auto& s : stages) {
    os << fmt::format("{},{},{},{},{}\n", s.stage, s.domain, s.users, s.items, s.interactions);
  }
}

// Overrides shared by the subcommands that take a config.
struct Overrides {
  std::string provider;
  std::string model;
  std::string replay_dir;
  std::string tasks;
  std::string out;
  int max_users = 0;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int parallelism = 0;
  int history_len = 0;
  int candidate_size = 0;

  void apply(ExperimentConfig& c) const {
    if (!provider.empty()) c.provider.kind = provider_kind_from_string(provider);
    if (!model.empty()) c.provider.model = model;
    if (!replay_dir.empty()) c.provider.replay_dir = replay_dir;
    if (!tasks.empty()) c.tasks_file = tasks;
    if (!out.empty()) c.output_dir = out;
    if (max_users > 0) c.max_users = max_users;
    if (seed_opt != nullptr && seed_opt->count() > 0) c.seed = seed;
    if (parallelism > 0) c.parallelism = parallelism;
    if (history_len > 0) {
      c.taskgen.history_len = history_len;
      c.filter.history_len_threshold = history_len;
    }
    if (candidate_size > 0) c.taskgen.candidate_size = candidate_size;
  }
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--provider", o.provider, "oracle | random | replay | adversarial | http");
  cmd->add_option("--model", o.model, "Model name sent to the provider");
  cmd->add_option("--replay-dir", o.replay_dir, "Completion cache served by the replay provider");
  cmd->add_option("--tasks", o.tasks, "Use this tasks.jsonl instead of building tasks");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--max-users", o.max_users, "Users sampled from the cohort");
  o.seed_opt = cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--parallelism", o.parallelism, "Concurrent completions");
  cmd->add_option("--history-len", o.history_len, "History length and filter threshold");
  cmd->add_option("--candidates", o.candidate_size, "Candidate list size m");
}

ExperimentConfig load(const std::string& path, const Overrides& o) {
  auto c = load_config(path);
  o.apply(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LLM cross-domain recommendation evaluation harness"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace | debug | info | warn | error")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Load a domain and print its statistics");
  std::string reviews, metadata, domain, ingest_config, export_dir;
  ingest->add_option("--reviews", reviews, "Review JSON-lines file (.gz allowed)");
  ingest->add_option("--metadata", metadata, "Metadata JSON-lines file (.gz allowed)");
  ingest->add_option("--domain", domain, "Domain id");
  ingest->add_option("--config", ingest_config, "Load both domains of an experiment config");
  ingest->add_option("--export-dir", export_dir, "Write the loaded domains as review/metadata JSON-lines");

  // filter
  auto* filter = app.add_subcommand("filter", "Run the filtering pipeline and report stage counts");
  std::string filter_config, filter_out;
  Overrides filter_ov;
  filter->add_option("--config", filter_config)->required();
  filter->add_option("--cohort-out", filter_out, "Directory for cohort.csv and stages.csv");
  filter->add_option("--history-len", filter_ov.history_len, "History-length threshold");

  // gentasks
  auto* gentasks = app.add_subcommand("gentasks", "Build the task set and write tasks.jsonl");
  std::string gen_config, gen_out = "tasks.jsonl";
  Overrides gen_ov;
  gentasks->add_option("--config", gen_config)->required();
  gentasks->add_option("-o,--output", gen_out, "Output file");
  gentasks->add_option("--max-users", gen_ov.max_users);
  gen_ov.seed_opt = gentasks->add_option("--seed", gen_ov.seed);
  gentasks->add_option("--history-len", gen_ov.history_len);
  gentasks->add_option("--candidates", gen_ov.candidate_size);

  // run
  auto* run = app.add_subcommand("run", "Run an experiment (or its matrix)");
  std::string run_config;
  Overrides run_ov;
  run->add_option("--config", run_config)->required();
  add_overrides(run, run_ov);

  // report
  auto* report = app.add_subcommand("report", "Recompute tables from a run directory's cache");
  std::string run_dir, report_out;
  report->add_option("--run-dir", run_dir)->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "Output directory (default <run-dir>/recomputed)");

  // parse-debug
  auto* parse_debug = app.add_subcommand("parse-debug", "Show how a completion is parsed");
  std::string cand_file, completion_file = "-", mode = "exact", refusals;
  double threshold = 0.9;
  parse_debug->add_option("--candidates", cand_file, "Presented titles, one per line")
      ->required()
      ->check(CLI::ExistingFile);
  parse_debug->add_option("--completion", completion_file, "Raw completion ('-' for stdin)");
  parse_debug->add_option("--mode", mode)->check(CLI::IsMember({"exact", "fuzzy"}));
  parse_debug->add_option("--threshold", threshold, "Fuzzy similarity threshold");
  parse_debug->add_option("--refusals", refusals, "Refusal phrase file");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*ingest) {
      std::vector<DomainDataset> domains;
      if (!ingest_config.empty()) {
        auto c = load_config(ingest_config);
        auto data = prepare_cohort(c);
        domains.push_back(std::move(data.source));
        domains.push_back(std::move(data.target));
      } else {
        if (reviews.empty() || metadata.empty() || domain.empty()) {
          throw ConfigError("ingest needs --config or all of --reviews, --metadata, --domain");
        }
        domains.push_back(load_metadata(metadata, load_reviews(reviews, domain)));
      }
      for (const auto& d : domains) {
        std::set<std::string> users;
        for (const auto& x : d.interactions) users.insert(x.user_id);
        fmt::print("{}: {} interactions, {} users, {} titled items, {} lines skipped, {} untitled "
                   "dropped, digest {}\n",
                   d.domain_id, d.interactions.size(), users.size(), d.catalog.size(),
                   d.stats.skipped_lines, d.stats.dropped_untitled, dataset_digest(d));
        if (!export_dir.empty()) {
          fs::create_directories(export_dir);
          std::string stem = d.domain_id;
          std::replace(stem.begin(), stem.end(), ' ', '_');
          write_amazon_jsonl(d, fs::path(export_dir) / (stem + "_5.json"),
                             fs::path(export_dir) / ("meta_" + stem + ".json"));
        }
      }
    } else if (*filter) {
      auto c = load(filter_config, filter_ov);
      auto data = prepare_cohort(c);
      print_stages(data.filtered.stages);
      fmt::print("average interactions per user after active filtering: source {:.2f}, target {:.2f}\n",
                 data.filtered.source_avg_len, data.filtered.target_avg_len);
      if (!filter_out.empty()) {
        fs::create_directories(filter_out);
        write_cohort_csv(data.filtered.cohort, fs::path(filter_out) / "cohort.csv");
        write_stages_csv(data.filtered.stages, fs::path(filter_out) / "stages.csv");
      }
    } else if (*gentasks) {
      auto c = load(gen_config, gen_ov);
      resolve_defaults(c);
      validate(c);
      auto build = build_tasks(c);
      if (auto parent = fs::path(gen_out).parent_path(); !parent.empty()) fs::create_directories(parent);
      write_tasks_jsonl(build.tasks, gen_out);
      fmt::print("{} tasks written to {} ({} sampled users, {} skipped), digest {}\n",
                 build.tasks.size(), gen_out, build.sampled_users.size(), build.skipped.size(),
                 task_set_digest(build.tasks));
      for (const auto& s : build.skipped) fmt::print("  skipped {}: {}\n", s.user_id, s.reason);
    } else if (*run) {
      auto c = load(run_config, run_ov);
      std::vector<ExperimentResult> results;
      std::vector<std::string> names;
      if (c.matrix.empty()) {
        results.push_back(run_experiment(c));
        names.push_back(c.name);
      } else {
        results = run_matrix(c);
        for (const auto& cell : expand_matrix(c)) names.push_back(cell.name);
      }
      for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& m = results[i].manifest;
        fmt::print("{}: {} tasks, {} ok / {} skipped / {} errored\n", names[i],
                   results[i].tasks.size(), m.count("ok"), m.count("skipped"), m.count("errored"));
        fmt::print("{}", report_csv(results[i].rows));
      }
      fmt::print("results in {}\n", c.output_dir.string());
    } else if (*report) {
      fs::path out = report_out.empty() ? fs::path(run_dir) / "recomputed" : fs::path(report_out);
      auto result = recompute_report(run_dir, out);
      fmt::print("{}", read_all((out / "report.md").string()));
    } else if (*parse_debug) {
      std::vector<std::string> titles;
      {
        std::istringstream is(read_all(cand_file));
        std::string line;
        while (std::getline(is, line)) {
          if (!line.empty() && line.back() == '\r') line.pop_back();
          if (!line.empty()) titles.push_back(line);
        }
      }
      ParseRules rules = default_parse_rules();
      rules.mode = match_mode_from_string(mode);
      rules.fuzzy_threshold = threshold;
      if (!refusals.empty()) rules.refusal_phrases = load_refusal_phrases(refusals);
      validate(rules);
      auto parsed = parse_completion(read_all(completion_file), titles, rules);
      fmt::print("status: {}\n", to_string(parsed.status));
      for (const auto& t : parsed.trace) {
        fmt::print("line {:>3} {:<14} sim {:.3f} -> {:<4} | {}\n", t.line_no, to_string(t.decision),
                   t.similarity, t.candidate >= 0 ? fmt::format("#{}", t.candidate + 1) : "-",
                   t.text);
      }
      fmt::print("ranking:");
      for (int p : parsed.ranked) fmt::print(" {}", p + 1);
      fmt::print("\nformat fixes {}, hallucinated {}, missing {}\n", parsed.n_format_fixes,
                 parsed.n_hallucinated, parsed.n_missing);
    }
  } catch (const MissingCompletionsError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
