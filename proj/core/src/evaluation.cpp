#include "xdrec/evaluation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "xdrec/errors.hpp"

namespace xdrec {

namespace {

constexpr std::array<std::string_view, kNumMetrics> kLabels = {
    "H@1", "H@5", "H@10", "P@1", "P@5", "P@10", "N@1", "N@5", "N@10"};

bool relevant(std::span<const int> gt, int position) {
  return std::find(gt.begin(), gt.end(), position) != gt.end();
}

std::size_t depth(std::span<const int> ranked, int k) {
  return std::min(ranked.size(), static_cast<std::size_t>(std::max(k, 0)));
}

}  // namespace

std::string_view metric_label(std::size_t index) { return kLabels.at(index); }

double hit_at_k(std::span<const int> ranked, std::span<const int> gt, int k) {
  for (std::size_t i = 0; i < depth(ranked, k); ++i) {
    if (relevant(gt, ranked[i])) return 1.0;
  }
  return 0.0;
}

double ap_at_k(std::span<const int> ranked, std::span<const int> gt, int k) {
  if (gt.empty() || k <= 0) return 0.0;
  double sum = 0.0;
  int hits = 0;
  for (std::size_t i = 0; i < depth(ranked, k); ++i) {
    if (relevant(gt, ranked[i])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(std::min<std::size_t>(static_cast<std::size_t>(k), gt.size()));
}

double ndcg_at_k(std::span<const int> ranked, std::span<const int> gt, int k) {
  if (gt.empty() || k <= 0) return 0.0;
  double dcg = 0.0;
  for (std::size_t i = 0; i < depth(ranked, k); ++i) {
    if (relevant(gt, ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  double idcg = 0.0;
  const auto ideal = std::min<std::size_t>(static_cast<std::size_t>(k), gt.size());
  for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

MetricVector compute_metrics(std::span<const int> ranked, std::span<const int> gt) {
  MetricVector v{};
  for (std::size_t c = 0; c < kCutoffs.size(); ++c) {
    v[c] = hit_at_k(ranked, gt, kCutoffs[c]);
    v[3 + c] = ap_at_k(ranked, gt, kCutoffs[c]);
    v[6 + c] = ndcg_at_k(ranked, gt, kCutoffs[c]);
  }
  return v;
}

MetricReport aggregate(const std::vector<std::vector<std::optional<MetricVector>>>& values) {
  MetricReport report;
  report.n_repeats = values.size();
  std::vector<MetricVector> repeat_means;
  std::size_t n_users = 0;
  for (const auto& repeat : values) n_users = std::max(n_users, repeat.size());
  std::vector<char> scored(n_users, 0);

  for (const auto& repeat : values) {
    MetricVector sum{};
    std::size_t n = 0;
    for (std::size_t u = 0; u < repeat.size(); ++u) {
      if (!repeat[u]) {
        ++report.n_skipped;
        continue;
      }
      scored[u] = 1;
      ++n;
      for (std::size_t i = 0; i < kNumMetrics; ++i) sum[i] += (*repeat[u])[i];
    }
    if (n == 0) continue;
    for (auto& s : sum) s /= static_cast<double>(n);
    repeat_means.push_back(sum);
  }
  if (repeat_means.empty()) throw EvaluationError("no scored completions; cannot build a report");

  report.n_users = static_cast<std::size_t>(std::count(scored.begin(), scored.end(), 1));
  const auto r = static_cast<double>(repeat_means.size());
  for (std::size_t i = 0; i < kNumMetrics; ++i) {
    double mean = 0.0;
    for (const auto& m : repeat_means) mean += m[i];
    mean /= r;
    double ss = 0.0;
    for (const auto& m : repeat_means) ss += (m[i] - mean) * (m[i] - mean);
    report.mean[i] = mean;
    report.std[i] = repeat_means.size() > 1 ? std::sqrt(ss / (r - 1.0)) : 0.0;
  }
  return report;
}

double relative_gain(double baseline, double treatment) {
  if (!(baseline > 0.0)) throw EvaluationError("relative gain needs a positive baseline");
  return 100.0 * (treatment - baseline) / baseline;
}

double pct_improved(const MetricVector& baseline, const MetricVector& treatment) {
  std::size_t improved = 0;
  for (std::size_t i = 0; i < kNumMetrics; ++i) {
    if (treatment[i] > baseline[i]) ++improved;
  }
  return 100.0 * static_cast<double>(improved) / static_cast<double>(kNumMetrics);
}

void compare_to_baseline(ReportRow& row, const ReportRow& baseline) {
  row.baseline = baseline.name;
  for (std::size_t i = 0; i < kNumMetrics; ++i) {
    if (baseline.report.mean[i] > 0.0) {
      row.gains[i] = relative_gain(baseline.report.mean[i], row.report.mean[i]);
    } else {
      row.gains[i].reset();
    }
  }
  row.pct_improved = pct_improved(baseline.report.mean, row.report.mean);
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = "variant,baseline,n_users,n_skipped,n_repeats,mismatch_rate,hallucination_rate";
  for (auto prefix : {"mean_", "std_", "gain_"}) {
    for (auto label : kLabels) out += fmt::format(",{}{}", prefix, label);
  }
  out += ",pct_imp\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    out += fmt::format("{},{},{},{},{},{:.6f},{:.6f}", row.name, row.baseline.value_or(""),
                       r.n_users, r.n_skipped, r.n_repeats, r.mismatch_rate,
                       r.hallucination_rate);
    for (double v : r.mean) out += fmt::format(",{:.6f}", v);
    for (double v : r.std) out += fmt::format(",{:.6f}", v);
    for (const auto& g : row.gains) out += g ? fmt::format(",{:.2f}", *g) : std::string(",");
    out += row.pct_improved ? fmt::format(",{:.2f}\n", *row.pct_improved) : std::string(",\n");
  }
  return out;
}

std::string report_markdown(std::span<const ReportRow> rows, std::string_view title) {
  std::string out = fmt::format("## {}\n\n| Variant | Users |", title);
  for (auto label : kLabels) out += fmt::format(" {} |", label);
  out += " %imp |\n|---|---|";
  for (std::size_t i = 0; i <= kNumMetrics; ++i) out += "---|";
  out += '\n';
  for (const auto& row : rows) {
    out += fmt::format("| {} | {} |", row.name, row.report.n_users);
    for (std::size_t i = 0; i < kNumMetrics; ++i) {
      out += fmt::format(" {:.4f} ± {:.4f} |", row.report.mean[i], row.report.std[i]);
    }
    out += row.pct_improved ? fmt::format(" {:.2f}% |\n", *row.pct_improved) : " |\n";
  }
  bool any_gain = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.baseline; });
  if (any_gain) {
    out += "\n### Relative gain vs. baseline\n\n| Variant | Baseline |";
    for (auto label : kLabels) out += fmt::format(" {} |", label);
    out += "\n|---|---|";
    for (std::size_t i = 0; i < kNumMetrics; ++i) out += "---|";
    out += '\n';
    for (const auto& row : rows) {
      if (!row.baseline) continue;
      out += fmt::format("| {} | {} |", row.name, *row.baseline);
      for (const auto& g : row.gains) out += g ? fmt::format(" {:.2f}% |", *g) : " n/a |";
      out += '\n';
    }
  }
  return out;
}

}  // namespace xdrec
