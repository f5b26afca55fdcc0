#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "xdrec/corpus.hpp"
#include "xdrec/evaluation.hpp"
#include "xdrec/filtering.hpp"
#include "xdrec/llm.hpp"
#include "xdrec/parse.hpp"
#include "xdrec/prompting.hpp"
#include "xdrec/rng.hpp"
#include "xdrec/taskgen.hpp"

namespace xdrec {

struct DomainSource {
  std::string domain_id;
  std::filesystem::path reviews;
  std::filesystem::path metadata;
};

struct Variant {
  std::string name;
  PromptFlags flags;
};

// Cross-product sweep declared in the config; empty axes are not swept.
struct MatrixAxes {
  std::vector<int> history_len;
  std::vector<int> candidate_size;
  std::vector<bool> guidance;
  std::vector<ProviderConfig> providers;

  [[nodiscard]] bool empty() const {
    return history_len.empty() && candidate_size.empty() && guidance.empty() && providers.empty();
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  DomainSource source;
  DomainSource target;
  std::optional<SyntheticSpec> synthetic;  // replaces source/target files
  int synthetic_source = 0;
  int synthetic_target = 1;
  FilterConfig filter;
  TaskGenConfig taskgen;
  ProviderConfig provider;
  std::optional<ProviderConfig> guidance_provider;  // defaults to `provider`
  std::vector<Variant> variants;  // defaults to wo_info + w_info
  std::string baseline_variant = "wo_info";
  std::filesystem::path templates_dir;
  std::size_t max_prompt_chars = kDefaultMaxPromptChars;
  ParseRules parse = default_parse_rules();
  std::filesystem::path refusals_file;
  std::map<std::string, std::string> domain_groups;
  int max_users = 100;
  std::uint64_t seed = 2024;
  std::filesystem::path output_dir = "runs/experiment";
  std::filesystem::path tasks_file;  // when set, tasks are read instead of built
  int parallelism = 1;
  MatrixAxes matrix;
};

// Group labels for the four Amazon subsets used in the experiments.
std::map<std::string, std::string> default_domain_groups();

// Parses a config document; relative paths resolve against base_dir.
// Missing keys keep their defaults. Derived seeds are filled in.
ExperimentConfig config_from_json(const nlohmann::json& doc,
                                  const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& config);
void validate(const ExperimentConfig& config);

// Fills variants/output paths that depend on other fields.
void resolve_defaults(ExperimentConfig& config);

std::vector<ExperimentConfig> expand_matrix(const ExperimentConfig& config);

// All users when there are at most max_users; otherwise a seeded uniform
// sample without replacement. Result is sorted.
std::vector<std::string> sample_users(std::vector<std::string> users, std::size_t max_users,
                                      Rng& rng);

struct PreparedData {
  DomainDataset source;
  DomainDataset target;
  FilterOutcome filtered;
};

PreparedData prepare_cohort(const ExperimentConfig& config);

struct LedgerEntry {
  std::string user_id;
  std::string status;  // ok | skipped | errored
  std::string reason;
};

struct RunManifest {
  nlohmann::json config;
  std::map<std::string, std::string> dataset_digests;
  std::string task_set_digest;
  std::map<std::string, std::string> variant_task_digests;
  std::vector<StageCounts> filter_stages;
  std::size_t cohort_users = 0;
  std::vector<std::string> sampled_users;
  std::vector<LedgerEntry> ledger;
  GatewayStats provider_stats;
  std::optional<Guidance> guidance;
  double wall_clock_seconds = 0.0;
  std::string status = "complete";
  std::string error;

  [[nodiscard]] std::size_t count(std::string_view status_name) const;
};

nlohmann::json manifest_to_json(const RunManifest& manifest);

struct TaskBuild {
  std::vector<CdrTask> tasks;
  std::vector<SkippedUser> skipped;
  std::vector<std::string> sampled_users;
  std::optional<PreparedData> data;
};

// Cohort -> user sample -> tasks (or the tasks file when configured).
TaskBuild build_tasks(const ExperimentConfig& config);

struct ExperimentResult {
  std::vector<ReportRow> rows;
  RunManifest manifest;
  std::vector<CdrTask> tasks;
};

// Runs every variant over the same task set and writes report.csv,
// report.md, manifest.json and tasks.jsonl into config.output_dir.
// A replay run with missing completions throws MissingCompletionsError
// listing every missing hash after the manifest has been written.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                std::shared_ptr<Clock> clock = nullptr);

// Runs every matrix cell into its own subdirectory and writes summary.csv.
std::vector<ExperimentResult> run_matrix(const ExperimentConfig& config);

// Recomputes tables from a finished run directory using only its cache.
ExperimentResult recompute_report(const std::filesystem::path& run_dir,
                                  const std::filesystem::path& out_dir);

}  // namespace xdrec
