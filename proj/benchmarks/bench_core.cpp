#include <benchmark/benchmark.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <numeric>

#include "xdrec/evaluation.hpp"
#include "xdrec/filtering.hpp"
#include "xdrec/parse.hpp"
#include "xdrec/rng.hpp"
#include "xdrec/taskgen.hpp"

using namespace xdrec;

namespace {

const std::vector<DomainDataset>& synthetic_domains() {
  static const auto domains = [] {
    SyntheticSpec spec;
    spec.n_users = 2000;
    spec.n_items_per_domain = 400;
    spec.purchases_per_domain = 80;
    return generate_synthetic(spec);
  }();
  return domains;
}

void BM_FilterPipeline(benchmark::State& state) {
  spdlog::set_level(spdlog::level::warn);
  const auto& d = synthetic_domains();
  FilterConfig fc;
  fc.history_len_threshold = 20;
  for (auto _ : state) {
    auto out = run_filter_pipeline(d[0], d[1], fc);
    benchmark::DoNotOptimize(out.cohort.users.size());
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<std::int64_t>(d[0].interactions.size() + d[1].interactions.size()));
}
BENCHMARK(BM_FilterPipeline)->Unit(benchmark::kMillisecond);

void BM_GenerateTasks(benchmark::State& state) {
  spdlog::set_level(spdlog::level::warn);
  const auto& d = synthetic_domains();
  FilterConfig fc;
  fc.history_len_threshold = 20;
  const auto cohort = run_filter_pipeline(d[0], d[1], fc).cohort;
  TaskGenConfig tc;
  tc.history_len = 20;
  tc.candidate_size = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto set = generate_tasks(cohort, tc);
    benchmark::DoNotOptimize(set.tasks.size());
  }
}
BENCHMARK(BM_GenerateTasks)->Arg(20)->Arg(30)->Unit(benchmark::kMillisecond);

void BM_ComputeMetrics(benchmark::State& state) {
  const auto m = static_cast<int>(state.range(0));
  Rng rng(3);
  std::vector<int> ranked(static_cast<std::size_t>(m));
  std::iota(ranked.begin(), ranked.end(), 0);
  rng.shuffle(std::span(ranked));
  const std::vector<int> gt = {0, 1, 2};
  for (auto _ : state) benchmark::DoNotOptimize(compute_metrics(ranked, gt));
}
BENCHMARK(BM_ComputeMetrics)->Arg(20)->Arg(30);

void BM_ParseCompletion(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  std::vector<std::string> titles;
  for (std::size_t i = 0; i < m; ++i) titles.push_back(fmt::format("Synthetic Feature Film {:03}", i));
  std::string raw = "Here is the ranking:\n";
  for (std::size_t i = m; i-- > 0;) raw += fmt::format("{}. \"{}\"\n", m - i, titles[i]);
  raw += "Unlisted Bonus Disc\n";
  auto rules = default_parse_rules();
  rules.mode = state.range(1) != 0 ? MatchMode::fuzzy : MatchMode::exact;
  for (auto _ : state) {
    auto parsed = parse_completion(raw, titles, rules);
    benchmark::DoNotOptimize(parsed.ranked.data());
  }
}
BENCHMARK(BM_ParseCompletion)->Args({20, 0})->Args({20, 1})->Args({30, 0})->Args({30, 1});

}  // namespace

BENCHMARK_MAIN();
