#include "doctest.h"

#include <fmt/format.h>

#include <algorithm>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/filtering.hpp"
#include "xdrec/taskgen.hpp"

using namespace xdrec;
using testing::ix;
using testing::make_dataset;

namespace {

std::set<std::string> users_of(const DomainDataset& ds) {
  std::set<std::string> out;
  for (const auto& x : ds.interactions) out.insert(x.user_id);
  return out;
}

std::set<std::string> items_of(const DomainDataset& ds) {
  std::set<std::string> out;
  for (const auto& x : ds.interactions) out.insert(x.item_id);
  return out;
}

// Users: a (25 purchases), b (21), c (5), and eleven fillers with 22+ each.
// "ten" has exactly 10 buyers; p22 has two (a, b); p23 has one (a).
DomainDataset active_fixture() {
  std::vector<Interaction> xs;
  std::int64_t t = 0;
  auto buy = [&](const std::string& u, const std::string& i) { xs.push_back(ix(u, i, 5.0, ++t)); };
  for (int f = 0; f < 11; ++f) {
    auto u = fmt::format("f{:02}", f);
    for (int p = 0; p < 22; ++p) buy(u, fmt::format("p{:02}", p));
    if (f < 9) buy(u, "ten");
  }
  for (int p = 0; p < 24; ++p) buy("a", fmt::format("p{:02}", p));
  buy("a", "ten");
  for (int p = 0; p < 20; ++p) buy("b", fmt::format("p{:02}", p));
  buy("b", "p22");
  for (int p = 0; p < 5; ++p) buy("c", fmt::format("p{:02}", p));
  return make_dataset("d", xs);
}

// Straightforward re-statement of the single-pass rule.
std::vector<Interaction> brute_force_active(const std::vector<Interaction>& xs, int min_user,
                                            int min_item) {
  std::map<std::string, int> per_user;
  std::map<std::string, std::set<std::string>> per_item;
  for (const auto& x : xs) {
    per_user[x.user_id] += 1;
    per_item[x.item_id].insert(x.user_id);
  }
  std::vector<Interaction> out;
  for (const auto& x : xs) {
    if (per_user[x.user_id] > min_user && static_cast<int>(per_item[x.item_id].size()) > min_item) {
      out.push_back(x);
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("filtering") {

TEST_CASE("config validation") {
  FilterConfig c;
  CHECK_NOTHROW(validate(c));
  c.rating_floor = 0.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.min_item_buyers = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("rating filter") {
  FilterConfig c;
  SUBCASE("all five stars unchanged") {
    auto ds = make_dataset("d", {ix("u", "a", 5, 1), ix("u", "b", 5, 2)});
    CHECK(filter_rating(ds, c) == ds);
  }
  SUBCASE("{5,4,5} keeps two") {
    auto ds = make_dataset("d", {ix("u", "a", 5, 1), ix("u", "b", 4, 2), ix("u", "c", 5, 3)});
    CHECK(filter_rating(ds, c).interactions.size() == 2);
  }
  SUBCASE("synthetic corpus matches a hand tally") {
    SyntheticSpec spec;
    spec.n_users = 40;
    spec.n_items_per_domain = 80;
    spec.purchases_per_domain = 30;
    auto d = generate_synthetic(spec)[0];
    auto tally = std::count_if(d.interactions.begin(), d.interactions.end(),
                               [](const Interaction& x) { return x.rating == 5.0; });
    CHECK(filter_rating(d, c).interactions.size() == static_cast<std::size_t>(tally));
  }
}

TEST_CASE("active filter: boundary at exactly 20 purchases") {
  std::vector<Interaction> xs;
  std::int64_t t = 0;
  for (int u = 0; u < 10; ++u) {
    for (int i = 0; i < 21; ++i) xs.push_back(ix(fmt::format("o{}", u), fmt::format("i{}", i), 5, ++t));
  }
  for (int i = 0; i < 20; ++i) xs.push_back(ix("edge", fmt::format("i{}", i), 5, ++t));
  for (int i = 0; i < 21; ++i) xs.push_back(ix("over", fmt::format("i{}", i), 5, ++t));
  auto out = filter_active(make_dataset("d", xs), FilterConfig{});
  auto users = users_of(out);
  CHECK_FALSE(users.contains("edge"));
  CHECK(users.contains("over"));
  CHECK(users.size() == 11);
}

TEST_CASE("active filter: empty dataset") {
  CHECK(filter_active(DomainDataset{}, FilterConfig{}).interactions.empty());
}

TEST_CASE("active filter fixture") {
  FilterConfig c;
  auto ds = active_fixture();
  auto out = filter_active(ds, c);

  auto users = users_of(out);
  CHECK(users.contains("a"));
  CHECK(users.contains("b"));
  CHECK_FALSE(users.contains("c"));
  auto items = items_of(out);
  CHECK_FALSE(items.contains("ten"));
  CHECK_FALSE(items.contains("p22"));
  CHECK_FALSE(items.contains("p23"));
  CHECK_FALSE(out.catalog.contains("ten"));
  CHECK(out.catalog.size() == items.size());

  CHECK(out.interactions == brute_force_active(ds.interactions, 20, 10));

  // b ends with 20 interactions: kept by the single pass, dropped by a fixed point.
  auto b_count = std::count_if(out.interactions.begin(), out.interactions.end(),
                               [](const Interaction& x) { return x.user_id == "b"; });
  CHECK(b_count == 20);
  FilterConfig fixed = c;
  fixed.active_fixed_point = true;
  auto fp = filter_active(ds, fixed);
  CHECK_FALSE(users_of(fp).contains("b"));
  CHECK(filter_active(fp, fixed) == fp);
}

TEST_CASE("active filter agrees with brute force on synthetic data") {
  SyntheticSpec spec;
  spec.n_users = 80;
  spec.n_items_per_domain = 100;
  spec.purchases_per_domain = 40;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    spec.rng_seed = seed;
    auto d = filter_rating(generate_synthetic(spec)[1], FilterConfig{});
    for (auto [mu, mi] : {std::pair{5, 5}, std::pair{10, 8}, std::pair{20, 10}}) {
      FilterConfig c;
      c.min_user_purchases = mu;
      c.min_item_buyers = mi;
      CHECK(filter_active(d, c).interactions == brute_force_active(d.interactions, mu, mi));
    }
  }
}

TEST_CASE("common users") {
  auto src = make_dataset("s", {ix("u1", "a", 5, 1), ix("u2", "a", 5, 2), ix("u3", "b", 5, 3)});
  SUBCASE("overlap {u2,u3}") {
    auto tgt = make_dataset("t", {ix("u2", "x", 5, 5), ix("u3", "y", 5, 1), ix("u4", "x", 5, 1)});
    auto cohort = filter_common_users(src, tgt);
    CHECK(cohort.user_ids() == std::vector<std::string>{"u2", "u3"});
    CHECK(users_of(cohort.source) == std::set<std::string>{"u2", "u3"});
    CHECK(users_of(cohort.target) == std::set<std::string>{"u2", "u3"});
  }
  SUBCASE("disjoint") {
    auto tgt = make_dataset("t", {ix("v1", "x", 5, 5)});
    CHECK(filter_common_users(src, tgt).users.empty());
  }
  SUBCASE("identical user sets") {
    auto tgt = make_dataset("t", {ix("u1", "x", 5, 5), ix("u2", "x", 5, 5), ix("u3", "x", 5, 5)});
    CHECK(filter_common_users(src, tgt).users.size() == 3);
  }
}

TEST_CASE("per-user sequences are chronological with item_id tie order") {
  auto src = make_dataset("s", {ix("u", "c", 5, 2), ix("u", "b", 5, 1), ix("u", "a", 5, 2)});
  auto tgt = make_dataset("t", {ix("u", "z", 5, 9), ix("u", "y", 5, 9)});
  auto cohort = filter_common_users(src, tgt);
  REQUIRE(cohort.users.size() == 1);
  const auto& s = cohort.users[0].source;
  CHECK(s[0].item_id == "b");
  CHECK(s[1].item_id == "a");
  CHECK(s[2].item_id == "c");
  CHECK(cohort.users[0].target[0].item_id == "y");
}

TEST_CASE("history length filter boundary") {
  CrossDomainCohort cohort;
  cohort.users.push_back(testing::make_user("short", 19, 3));
  cohort.users.push_back(testing::make_user("exact", 20, 3));
  cohort.users.push_back(testing::make_user("few_target", 40, 2));
  FilterConfig c;
  c.history_len_threshold = 20;
  auto out = filter_history_length(cohort, c);
  CHECK(out.user_ids() == std::vector<std::string>{"exact"});
}

TEST_CASE("history is counted before the ground-truth cutoff, not in total") {
  // 25 source purchases, but 10 of them happen after the target purchases.
  auto u = testing::make_user("u", 15, 3);
  for (int i = 0; i < 10; ++i) u.source.push_back(ix("u", fmt::format("late{}", i), 5, 100 + i));
  CrossDomainCohort cohort;
  cohort.users.push_back(u);
  FilterConfig c;
  c.history_len_threshold = 20;
  CHECK(filter_history_length(cohort, c).users.empty());
  c.history_len_threshold = 15;
  CHECK(filter_history_length(cohort, c).users.size() == 1);
}

TEST_CASE("monotonicity under threshold sweeps") {
  SyntheticSpec spec;
  spec.n_users = 80;
  spec.n_items_per_domain = 120;
  spec.purchases_per_domain = 80;
  spec.rng_seed = 5;
  auto d = generate_synthetic(spec);

  std::size_t prev = SIZE_MAX;
  for (int h : {20, 30, 40}) {
    FilterConfig c;
    c.history_len_threshold = h;
    auto n = run_filter_pipeline(d[0], d[1], c).cohort.users.size();
    CHECK(n <= prev);
    prev = n;
  }
  prev = SIZE_MAX;
  std::size_t prev_items = SIZE_MAX;
  for (int mu : {5, 10, 20, 30}) {
    FilterConfig c;
    c.min_user_purchases = mu;
    auto out = filter_active(filter_rating(d[0], c), c);
    CHECK(users_of(out).size() <= prev);
    prev = users_of(out).size();
  }
  for (int mi : {2, 5, 10, 15}) {
    FilterConfig c;
    c.min_item_buyers = mi;
    auto out = filter_active(filter_rating(d[0], c), c);
    CHECK(items_of(out).size() <= prev_items);
    prev_items = items_of(out).size();
  }
}

TEST_CASE("idempotence of rating, common-user and history stages") {
  SyntheticSpec spec;
  spec.n_users = 60;
  spec.n_items_per_domain = 120;
  spec.purchases_per_domain = 70;
  auto d = generate_synthetic(spec);
  FilterConfig c;
  c.history_len_threshold = 20;
  auto r = filter_rating(d[0], c);
  CHECK(filter_rating(r, c) == r);

  auto src = filter_active(r, c);
  auto tgt = filter_active(filter_rating(d[1], c), c);
  auto cohort = filter_common_users(src, tgt);
  auto again = filter_common_users(cohort.source, cohort.target);
  CHECK(again.user_ids() == cohort.user_ids());
  CHECK(again.source == cohort.source);

  auto h = filter_history_length(cohort, c);
  auto h2 = filter_history_length(h, c);
  CHECK(h2.user_ids() == h.user_ids());
  CHECK(h2.source == h.source);
  CHECK(h2.target == h.target);
}

TEST_CASE("every survivor materializes into a valid task") {
  auto cohort = testing::small_cohort(11, 20);
  REQUIRE(cohort.users.size() > 5);
  TaskGenConfig tc;
  tc.history_len = 20;
  tc.rng_seed = 9;
  auto set = generate_tasks(cohort, tc);
  CHECK(set.skipped.empty());
  CHECK(set.tasks.size() == cohort.users.size());
}

TEST_CASE("pipeline stage counts are logged in order") {
  SyntheticSpec spec;
  spec.n_users = 30;
  spec.n_items_per_domain = 60;
  spec.purchases_per_domain = 40;
  auto d = generate_synthetic(spec);
  FilterConfig c;
  c.history_len_threshold = 5;
  auto out = run_filter_pipeline(d[0], d[1], c);
  REQUIRE(out.stages.size() == 10);
  std::vector<std::string> names;
  for (const auto& s : out.stages) names.push_back(s.stage);
  CHECK(names == std::vector<std::string>{"input", "input", "rating", "rating", "active", "active",
                                          "common_users", "common_users", "history_len",
                                          "history_len"});
  // Counts never grow from stage to stage on either side.
  for (std::size_t i = 2; i < out.stages.size(); ++i) {
    CHECK(out.stages[i].interactions <= out.stages[i - 2].interactions);
    CHECK(out.stages[i].users <= out.stages[i - 2].users);
  }
  CHECK(out.stages[9].users == out.cohort.users.size());
}

TEST_CASE("cohort csv export") {
  testing::TempDir dir("filter");
  CrossDomainCohort cohort;
  cohort.source.domain_id = "s";
  cohort.target.domain_id = "t";
  cohort.users.push_back(testing::make_user("u,1", 1, 1));
  write_cohort_csv(cohort, dir / "c.csv");
  CHECK(testing::read_file(dir / "c.csv") ==
        "user_id,domain,item_id,timestamp\n\"u,1\",s,s000,1\n\"u,1\",t,t000,2\n");
}

}
