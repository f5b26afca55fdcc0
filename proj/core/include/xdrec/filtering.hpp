#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xdrec/corpus.hpp"

namespace xdrec {

struct FilterConfig {
  double rating_floor = 5.0;
  int min_user_purchases = 20;  // keep users with strictly more
  int min_item_buyers = 10;     // keep items with strictly more distinct buyers
  int history_len_threshold = 30;
  // Off: one pass evaluated on the input. On: repeat until nothing changes
  // (classic k-core behaviour), offered for comparison only.
  bool active_fixed_point = false;
};

void validate(const FilterConfig& config);

// One user's interactions on both sides, each sorted ascending by
// (timestamp, item_id).
struct UserRecord {
  std::string user_id;
  std::vector<Interaction> source;
  std::vector<Interaction> target;
};

struct CrossDomainCohort {
  DomainDataset source;
  DomainDataset target;
  std::vector<UserRecord> users;  // sorted by user_id

  [[nodiscard]] std::vector<std::string> user_ids() const;
};

// Ascending (timestamp, item_id); the tie rule used everywhere.
bool chronological_less(const Interaction& a, const Interaction& b);

DomainDataset filter_rating(const DomainDataset& dataset, const FilterConfig& config);
DomainDataset filter_active(const DomainDataset& dataset, const FilterConfig& config);
CrossDomainCohort filter_common_users(const DomainDataset& source, const DomainDataset& target);
CrossDomainCohort filter_history_length(const CrossDomainCohort& cohort,
                                        const FilterConfig& config);

struct StageCounts {
  std::string stage;
  std::string domain;  // "source", "target" or "cohort"
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
};

struct FilterOutcome {
  CrossDomainCohort cohort;
  std::vector<StageCounts> stages;
  double source_avg_len = 0.0;  // per-user interactions after active filtering
  double target_avg_len = 0.0;
};

// rating -> active -> common-user -> history-length, in that fixed order.
FilterOutcome run_filter_pipeline(const DomainDataset& source, const DomainDataset& target,
                                  const FilterConfig& config);

StageCounts count_stage(std::string stage, std::string domain, const DomainDataset& dataset);

// CSV audit export: user_id,domain,item_id,timestamp.
void write_cohort_csv(const CrossDomainCohort& cohort, const std::filesystem::path& path);

}  // namespace xdrec
