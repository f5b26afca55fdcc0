#include "xdrec/taskgen.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <unordered_set>

#include "xdrec/digest.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/parse.hpp"

namespace xdrec {

using nlohmann::json;

void validate(const TaskGenConfig& config) {
  if (config.history_len < 1) throw ConfigError("taskgen: history_len must be >= 1");
  if (config.n_ground_truth != 3) throw ConfigError("taskgen: n_ground_truth must be 3");
  if (config.candidate_size <= config.n_ground_truth) {
    throw ConfigError("taskgen: candidate_size must exceed n_ground_truth");
  }
  if (config.n_repeats < 1) throw ConfigError("taskgen: n_repeats must be >= 1");
}

std::vector<std::string> CdrTask::presented_titles(std::size_t repeat) const {
  const auto& perm = shuffles.at(repeat);
  std::vector<std::string> out;
  out.reserve(perm.size());
  for (int idx : perm) out.push_back(candidate_titles.at(static_cast<std::size_t>(idx)));
  return out;
}

std::vector<int> CdrTask::ground_truth_positions(std::size_t repeat) const {
  const auto& perm = shuffles.at(repeat);
  std::vector<int> out;
  for (std::size_t pos = 0; pos < perm.size(); ++pos) {
    if (static_cast<std::size_t>(perm[pos]) < ground_truth.size()) {
      out.push_back(static_cast<int>(pos));
    }
  }
  return out;
}

void validate(const CdrTask& task, std::size_t n_ground_truth) {
  auto fail = [&](std::string_view what) {
    throw TaskGenError(fmt::format("task {}: {}", task.user_id, what));
  };
  if (task.ground_truth.size() != n_ground_truth) fail("wrong ground-truth count");
  if (task.candidates.size() != task.candidate_titles.size()) fail("title/candidate mismatch");
  if (!std::equal(task.ground_truth.begin(), task.ground_truth.end(), task.candidates.begin())) {
    fail("ground truth must lead the candidate list");
  }
  std::unordered_set<std::string> seen(task.candidates.begin(), task.candidates.end());
  if (seen.size() != task.candidates.size()) fail("duplicate candidates");
  const auto m = task.candidates.size();
  for (const auto& perm : task.shuffles) {
    if (perm.size() != m) fail("shuffle length differs from candidate count");
    std::vector<char> hit(m, 0);
    for (int p : perm) {
      if (p < 0 || static_cast<std::size_t>(p) >= m || hit[static_cast<std::size_t>(p)]) {
        fail("shuffle is not a permutation");
      }
      hit[static_cast<std::size_t>(p)] = 1;
    }
  }
  if (task.shuffles.empty()) fail("no shuffles");
  std::unordered_set<std::string> history_keys;
  for (const auto& title : task.history) history_keys.insert(title_key(title));
  for (std::size_t i = 0; i < task.ground_truth.size(); ++i) {
    if (history_keys.contains(title_key(task.candidate_titles[i]))) {
      fail("ground-truth title appears in the history");
    }
  }
}

std::optional<GroundTruth> select_ground_truth(const UserRecord& user, std::size_t count) {
  std::vector<const Interaction*> order;
  order.reserve(user.target.size());
  for (const auto& x : user.target) order.push_back(&x);
  std::stable_sort(order.begin(), order.end(), [](const Interaction* a, const Interaction* b) {
    if (a->timestamp != b->timestamp) return a->timestamp > b->timestamp;
    return a->item_id < b->item_id;
  });
  GroundTruth gt;
  std::int64_t cutoff = 0;
  for (const auto* x : order) {
    if (gt.items.size() == count) break;
    if (std::find(gt.items.begin(), gt.items.end(), x->item_id) != gt.items.end()) continue;
    gt.items.push_back(x->item_id);
    cutoff = x->timestamp;
  }
  if (gt.items.size() < count) return std::nullopt;
  gt.cutoff = cutoff;
  return gt;
}

std::size_t count_history_before(const UserRecord& user, std::int64_t cutoff) {
  return static_cast<std::size_t>(std::count_if(user.source.begin(), user.source.end(),
                                                [&](const auto& x) { return x.timestamp < cutoff; }));
}

std::vector<std::string> build_history(const UserRecord& user, std::int64_t cutoff,
                                       std::size_t history_len, const Catalog& source_catalog) {
  std::vector<const Interaction*> before;
  for (const auto& x : user.source) {
    if (x.timestamp < cutoff) before.push_back(&x);
  }
  if (before.size() < history_len) {
    throw TaskGenError(fmt::format("user {}: {} source interactions before cutoff, need {}",
                                   user.user_id, before.size(), history_len));
  }
  std::stable_sort(before.begin(), before.end(), [](const Interaction* a, const Interaction* b) {
    return chronological_less(*b, *a);
  });
  std::vector<std::string> titles;
  titles.reserve(history_len);
  for (std::size_t i = 0; i < history_len; ++i) {
    auto it = source_catalog.find(before[i]->item_id);
    if (it == source_catalog.end()) {
      throw TaskGenError(fmt::format("user {}: history item {} missing from source catalog",
                                     user.user_id, before[i]->item_id));
    }
    titles.push_back(it->second);
  }
  return titles;
}

std::vector<std::string> sample_negatives(const Catalog& target_catalog, const UserRecord& user,
                                          std::size_t count, Rng& rng) {
  std::unordered_set<std::string_view> bought;
  std::unordered_set<std::string> taken_titles;
  for (const auto& x : user.target) {
    bought.insert(x.item_id);
    auto it = target_catalog.find(x.item_id);
    if (it != target_catalog.end()) taken_titles.insert(title_key(it->second));
  }
  std::vector<const std::pair<const std::string, std::string>*> pool;
  pool.reserve(target_catalog.size());
  for (const auto& entry : target_catalog) {
    if (!bought.contains(entry.first)) pool.push_back(&entry);
  }
  if (pool.size() < count) {
    throw TaskGenError(fmt::format("user {}: negative pool has {} items, need {}", user.user_id,
                                   pool.size(), count));
  }
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t k = 0; k < pool.size() && out.size() < count; ++k) {
    auto j = k + static_cast<std::size_t>(rng.uniform(pool.size() - k));
    std::swap(pool[k], pool[j]);
    if (!taken_titles.insert(title_key(pool[k]->second)).second) continue;
    out.push_back(pool[k]->first);
  }
  if (out.size() < count) {
    throw TaskGenError(fmt::format("user {}: only {} negatives with distinct titles, need {}",
                                   user.user_id, out.size(), count));
  }
  return out;
}

std::vector<std::vector<int>> bootstrap_shuffle(std::size_t m, std::size_t n_repeats, Rng& rng) {
  std::vector<std::vector<int>> out(n_repeats);
  for (auto& perm : out) {
    perm.resize(m);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
  }
  return out;
}

TaskSet generate_tasks(const CrossDomainCohort& cohort, const TaskGenConfig& config,
                       const std::vector<std::string>* only) {
  validate(config);
  const Rng master(config.rng_seed);
  std::unordered_set<std::string_view> wanted;
  if (only != nullptr) wanted.insert(only->begin(), only->end());

  const auto m = static_cast<std::size_t>(config.candidate_size);
  const auto n_gt = static_cast<std::size_t>(config.n_ground_truth);
  TaskSet set;
  for (const auto& user : cohort.users) {
    if (only != nullptr && !wanted.contains(user.user_id)) continue;
    try {
      auto gt = select_ground_truth(user, n_gt);
      if (!gt) throw TaskGenError("fewer than 3 distinct target purchases");

      CdrTask task;
      task.user_id = user.user_id;
      task.source_domain_id = cohort.source.domain_id;
      task.target_domain_id = cohort.target.domain_id;
      task.cutoff = gt->cutoff;
      task.history = build_history(user, gt->cutoff, static_cast<std::size_t>(config.history_len),
                                   cohort.source.catalog);

      Rng rng = master.split(user.user_id);
      task.rng_seed = rng.seed();
      Rng negatives_rng = rng.split("negatives");
      Rng shuffle_rng = rng.split("shuffles");

      task.ground_truth = gt->items;
      task.candidates = gt->items;
      for (auto& id : sample_negatives(cohort.target.catalog, user, m - n_gt, negatives_rng)) {
        task.candidates.push_back(std::move(id));
      }
      for (const auto& id : task.candidates) {
        auto it = cohort.target.catalog.find(id);
        if (it == cohort.target.catalog.end()) {
          throw TaskGenError("candidate " + id + " missing from target catalog");
        }
        task.candidate_titles.push_back(it->second);
      }
      task.shuffles =
          bootstrap_shuffle(m, static_cast<std::size_t>(config.n_repeats), shuffle_rng);
      validate(task, n_gt);
      set.tasks.push_back(std::move(task));
    } catch (const TaskGenError& e) {
      set.skipped.push_back({user.user_id, e.what()});
    }
  }
  return set;
}

std::string task_to_json_line(const CdrTask& t) {
  json j = {{"user_id", t.user_id},
            {"source_domain", t.source_domain_id},
            {"target_domain", t.target_domain_id},
            {"cutoff", t.cutoff},
            {"rng_seed", t.rng_seed},
            {"history", t.history},
            {"ground_truth", t.ground_truth},
            {"candidates", t.candidates},
            {"candidate_titles", t.candidate_titles},
            {"shuffles", t.shuffles}};
  return j.dump();
}

CdrTask task_from_json_line(const std::string& line) {
  json j = json::parse(line, nullptr, false);
  if (!j.is_object()) throw FormatError("task line is not a JSON object");
  try {
    CdrTask t;
    t.user_id = j.at("user_id").get<std::string>();
    t.source_domain_id = j.at("source_domain").get<std::string>();
    t.target_domain_id = j.at("target_domain").get<std::string>();
    t.cutoff = j.at("cutoff").get<std::int64_t>();
    t.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    t.history = j.at("history").get<std::vector<std::string>>();
    t.ground_truth = j.at("ground_truth").get<std::vector<std::string>>();
    t.candidates = j.at("candidates").get<std::vector<std::string>>();
    t.candidate_titles = j.at("candidate_titles").get<std::vector<std::string>>();
    t.shuffles = j.at("shuffles").get<std::vector<std::vector<int>>>();
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed task line: ") + e.what());
  }
}

std::string tasks_to_jsonl(const std::vector<CdrTask>& tasks) {
  std::string out;
  for (const auto& t : tasks) {
    out += task_to_json_line(t);
    out += '\n';
  }
  return out;
}

void write_tasks_jsonl(const std::vector<CdrTask>& tasks, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << tasks_to_jsonl(tasks);
}

std::vector<CdrTask> read_tasks_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<CdrTask> tasks;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    tasks.push_back(task_from_json_line(line));
  }
  return tasks;
}

std::string task_set_digest(const std::vector<CdrTask>& tasks) {
  return sha256_hex(tasks_to_jsonl(tasks));
}

}  // namespace xdrec
