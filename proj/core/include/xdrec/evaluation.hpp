#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xdrec {

inline constexpr std::array<int, 3> kCutoffs = {1, 5, 10};
inline constexpr std::size_t kNumMetrics = 9;

// H@1 H@5 H@10 P@1 P@5 P@10 N@1 N@5 N@10 (P = MAP).
using MetricVector = std::array<double, kNumMetrics>;

std::string_view metric_label(std::size_t index);

// `ranked` and `ground_truth` hold presented-list positions; `ranked` is
// duplicate-free and may be shorter than the candidate list.
double hit_at_k(std::span<const int> ranked, std::span<const int> ground_truth, int k);

// Sum of precision@i over relevant ranks i <= k, divided by min(k, |gt|).
double ap_at_k(std::span<const int> ranked, std::span<const int> ground_truth, int k);

// Binary-relevance DCG@k over the ideal DCG@k.
double ndcg_at_k(std::span<const int> ranked, std::span<const int> ground_truth, int k);

MetricVector compute_metrics(std::span<const int> ranked, std::span<const int> ground_truth);

struct MetricReport {
  MetricVector mean{};
  MetricVector std{};
  std::size_t n_users = 0;    // users with at least one scored repeat
  std::size_t n_skipped = 0;  // completions excluded (refusals, empty parses)
  std::size_t n_repeats = 0;
  double mismatch_rate = 0.0;       // missing candidates / candidates shown
  double hallucination_rate = 0.0;  // unmatched lines / content lines
};

// values[repeat][user]; nullopt marks a skipped completion. Per repeat the
// users are averaged; the report carries mean and sample std (n-1) of the
// repeat means. Throws EvaluationError when nothing was scored.
MetricReport aggregate(const std::vector<std::vector<std::optional<MetricVector>>>& values);

// 100 * (treatment - baseline) / baseline. Throws when baseline <= 0.
double relative_gain(double baseline, double treatment);

// Percentage of the nine cells where treatment strictly beats baseline.
double pct_improved(const MetricVector& baseline, const MetricVector& treatment);

struct ReportRow {
  std::string name;
  MetricReport report;
  // Filled for rows compared against a baseline row.
  std::optional<std::string> baseline;
  std::array<std::optional<double>, kNumMetrics> gains{};
  std::optional<double> pct_improved;
};

// Attaches gains and %imp of `row` relative to `baseline`. Cells whose
// baseline mean is zero get no gain.
void compare_to_baseline(ReportRow& row, const ReportRow& baseline);

std::string report_csv(std::span<const ReportRow> rows);
std::string report_markdown(std::span<const ReportRow> rows, std::string_view title);

}  // namespace xdrec
