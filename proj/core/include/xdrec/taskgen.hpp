#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xdrec/corpus.hpp"
#include "xdrec/filtering.hpp"
#include "xdrec/rng.hpp"

namespace xdrec {

struct TaskGenConfig {
  int history_len = 30;
  int candidate_size = 20;
  int n_ground_truth = 3;
  int n_repeats = 3;
  std::uint64_t rng_seed = 0;
};

void validate(const TaskGenConfig& config);

// One evaluation unit. Candidates hold the ground truth first, then the
// negatives; each shuffle maps presented position -> candidate index.
struct CdrTask {
  std::string user_id;
  std::string source_domain_id;
  std::string target_domain_id;
  std::vector<std::string> history;  // titles, most recent first
  std::vector<std::string> ground_truth;
  std::vector<std::string> candidates;
  std::vector<std::string> candidate_titles;
  std::vector<std::vector<int>> shuffles;
  std::int64_t cutoff = 0;
  std::uint64_t rng_seed = 0;

  [[nodiscard]] std::size_t size() const { return candidates.size(); }
  [[nodiscard]] std::size_t n_repeats() const { return shuffles.size(); }

  // Titles in the order shown to the model for the given repeat.
  [[nodiscard]] std::vector<std::string> presented_titles(std::size_t repeat) const;
  // Presented positions that hold a ground-truth item.
  [[nodiscard]] std::vector<int> ground_truth_positions(std::size_t repeat) const;

  friend bool operator==(const CdrTask&, const CdrTask&) = default;
};

// Throws TaskGenError naming the first violated invariant.
void validate(const CdrTask& task, std::size_t n_ground_truth = 3);

struct GroundTruth {
  std::vector<std::string> items;
  std::int64_t cutoff = 0;
};

// Most recent distinct target purchases (ties: smaller item_id first);
// cutoff is the earliest of their timestamps. nullopt when the user has
// fewer than `count` distinct target items.
std::optional<GroundTruth> select_ground_truth(const UserRecord& user, std::size_t count = 3);

// Source interactions strictly before `cutoff`.
std::size_t count_history_before(const UserRecord& user, std::int64_t cutoff);

std::vector<std::string> build_history(const UserRecord& user, std::int64_t cutoff,
                                       std::size_t history_len, const Catalog& source_catalog);

// `count` distinct target items drawn uniformly without replacement from the
// catalog minus everything the user bought there. Items whose title collides
// with one of the user's purchases (or an earlier draw) are passed over.
std::vector<std::string> sample_negatives(const Catalog& target_catalog, const UserRecord& user,
                                          std::size_t count, Rng& rng);

std::vector<std::vector<int>> bootstrap_shuffle(std::size_t m, std::size_t n_repeats, Rng& rng);

struct SkippedUser {
  std::string user_id;
  std::string reason;
};

struct TaskSet {
  std::vector<CdrTask> tasks;
  std::vector<SkippedUser> skipped;
};

// Builds one task per cohort user (or per listed user when `only` is given).
// Each user draws from its own substream of config.rng_seed.
TaskSet generate_tasks(const CrossDomainCohort& cohort, const TaskGenConfig& config,
                       const std::vector<std::string>* only = nullptr);

std::string task_to_json_line(const CdrTask& task);
CdrTask task_from_json_line(const std::string& line);
std::string tasks_to_jsonl(const std::vector<CdrTask>& tasks);
void write_tasks_jsonl(const std::vector<CdrTask>& tasks, const std::filesystem::path& path);
std::vector<CdrTask> read_tasks_jsonl(const std::filesystem::path& path);
std::string task_set_digest(const std::vector<CdrTask>& tasks);

}  // namespace xdrec
