#include "xdrec/filtering.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include "xdrec/errors.hpp"
#include "xdrec/taskgen.hpp"

namespace xdrec {

void validate(const FilterConfig& config) {
  if (config.rating_floor < 1.0 || config.rating_floor > 5.0) {
    throw ConfigError("filter: rating_floor must lie in [1, 5]");
  }
  if (config.min_user_purchases < 1 || config.min_item_buyers < 1 ||
      config.history_len_threshold < 1) {
    throw ConfigError("filter: thresholds must be >= 1");
  }
}

bool chronological_less(const Interaction& a, const Interaction& b) {
  if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
  return a.item_id < b.item_id;
}

std::vector<std::string> CrossDomainCohort::user_ids() const {
  std::vector<std::string> ids;
  ids.reserve(users.size());
  for (const auto& u : users) ids.push_back(u.user_id);
  return ids;
}

DomainDataset filter_rating(const DomainDataset& dataset, const FilterConfig& config) {
  DomainDataset out = dataset;
  std::erase_if(out.interactions,
                [&](const Interaction& x) { return x.rating < config.rating_floor; });
  return out;
}

namespace {

DomainDataset active_pass(const DomainDataset& dataset, const FilterConfig& config) {
  std::unordered_map<std::string_view, std::size_t> user_count;
  std::unordered_map<std::string_view, std::unordered_set<std::string_view>> buyers;
  for (const auto& x : dataset.interactions) {
    ++user_count[x.user_id];
    buyers[x.item_id].insert(x.user_id);
  }
  const auto min_user = static_cast<std::size_t>(config.min_user_purchases);
  const auto min_item = static_cast<std::size_t>(config.min_item_buyers);

  DomainDataset out;
  out.domain_id = dataset.domain_id;
  out.group_id = dataset.group_id;
  out.stats = dataset.stats;
  for (const auto& x : dataset.interactions) {
    if (user_count[x.user_id] > min_user && buyers[x.item_id].size() > min_item) {
      out.interactions.push_back(x);
    }
  }
  for (const auto& [id, title] : dataset.catalog) {
    auto it = buyers.find(id);
    if (it != buyers.end() && it->second.size() > min_item) out.catalog.emplace(id, title);
  }
  return out;
}

}  // namespace

DomainDataset filter_active(const DomainDataset& dataset, const FilterConfig& config) {
  DomainDataset out = active_pass(dataset, config);
  if (config.active_fixed_point) {
    while (true) {
      DomainDataset next = active_pass(out, config);
      if (next.interactions.size() == out.interactions.size() &&
          next.catalog.size() == out.catalog.size()) {
        break;
      }
      out = std::move(next);
    }
  }
  return out;
}

namespace {

std::map<std::string, std::vector<Interaction>> group_by_user(const DomainDataset& ds) {
  std::map<std::string, std::vector<Interaction>> by_user;
  for (const auto& x : ds.interactions) by_user[x.user_id].push_back(x);
  for (auto& [_, seq] : by_user) std::stable_sort(seq.begin(), seq.end(), chronological_less);
  return by_user;
}

DomainDataset restrict_to(const DomainDataset& ds,
                          const std::unordered_set<std::string_view>& users) {
  DomainDataset out;
  out.domain_id = ds.domain_id;
  out.group_id = ds.group_id;
  out.catalog = ds.catalog;
  out.stats = ds.stats;
  for (const auto& x : ds.interactions) {
    if (users.contains(x.user_id)) out.interactions.push_back(x);
  }
  return out;
}

}  // namespace

CrossDomainCohort filter_common_users(const DomainDataset& source, const DomainDataset& target) {
  auto src = group_by_user(source);
  auto tgt = group_by_user(target);

  CrossDomainCohort cohort;
  std::unordered_set<std::string_view> common;
  for (auto& [user, seq] : src) {
    auto it = tgt.find(user);
    if (it == tgt.end()) continue;
    cohort.users.push_back({user, std::move(seq), std::move(it->second)});
  }
  for (const auto& u : cohort.users) common.insert(u.user_id);
  cohort.source = restrict_to(source, common);
  cohort.target = restrict_to(target, common);
  if (cohort.users.empty()) {
    spdlog::warn("no common users between '{}' and '{}'", source.domain_id, target.domain_id);
  }
  return cohort;
}

CrossDomainCohort filter_history_length(const CrossDomainCohort& cohort,
                                        const FilterConfig& config) {
  CrossDomainCohort out;
  std::unordered_set<std::string_view> kept;
  for (const auto& user : cohort.users) {
    auto gt = select_ground_truth(user);
    if (!gt) continue;
    if (count_history_before(user, gt->cutoff) >=
        static_cast<std::size_t>(config.history_len_threshold)) {
      out.users.push_back(user);
    }
  }
  for (const auto& u : out.users) kept.insert(u.user_id);
  out.source = restrict_to(cohort.source, kept);
  out.target = restrict_to(cohort.target, kept);
  return out;
}

StageCounts count_stage(std::string stage, std::string domain, const DomainDataset& dataset) {
  std::unordered_set<std::string_view> users;
  std::unordered_set<std::string_view> items;
  for (const auto& x : dataset.interactions) {
    users.insert(x.user_id);
    items.insert(x.item_id);
  }
  return {std::move(stage), std::move(domain), users.size(), items.size(),
          dataset.interactions.size()};
}

FilterOutcome run_filter_pipeline(const DomainDataset& source, const DomainDataset& target,
                                  const FilterConfig& config) {
  validate(config);
  FilterOutcome out;
  auto log = [&](StageCounts c) {
    spdlog::info("filter {:<14} {:<6} users={} items={} interactions={}", c.stage, c.domain,
                 c.users, c.items, c.interactions);
    out.stages.push_back(std::move(c));
  };
  log(count_stage("input", "source", source));
  log(count_stage("input", "target", target));

  auto src = filter_rating(source, config);
  auto tgt = filter_rating(target, config);
  log(count_stage("rating", "source", src));
  log(count_stage("rating", "target", tgt));

  src = filter_active(src, config);
  tgt = filter_active(tgt, config);
  log(count_stage("active", "source", src));
  log(count_stage("active", "target", tgt));
  out.source_avg_len = average_user_length(src);
  out.target_avg_len = average_user_length(tgt);

  auto cohort = filter_common_users(src, tgt);
  log(count_stage("common_users", "source", cohort.source));
  log(count_stage("common_users", "target", cohort.target));

  out.cohort = filter_history_length(cohort, config);
  log(count_stage("history_len", "source", out.cohort.source));
  log(count_stage("history_len", "target", out.cohort.target));
  return out;
}

void write_cohort_csv(const CrossDomainCohort& cohort, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "user_id,domain,item_id,timestamp\n";
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + '"';
  };
  for (const auto& u : cohort.users) {
    for (const auto& x : u.source) {
      os << quote(u.user_id) << ',' << quote(cohort.source.domain_id) << ',' << quote(x.item_id)
         << ',' << x.timestamp << '\n';
    }
    for (const auto& x : u.target) {
      os << quote(u.user_id) << ',' << quote(cohort.target.domain_id) << ',' << quote(x.item_id)
         << ',' << x.timestamp << '\n';
    }
  }
}

}  // namespace xdrec
