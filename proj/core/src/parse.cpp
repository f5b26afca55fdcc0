#include "xdrec/parse.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <tuple>
#include <unordered_map>

#include "xdrec/errors.hpp"

namespace xdrec {

std::string_view to_string(ParseStatus status) {
  switch (status) {
    case ParseStatus::ok:
      return "ok";
    case ParseStatus::skipped_refusal:
      return "skipped_refusal";
    case ParseStatus::skipped_empty:
      return "skipped_empty";
  }
  return "unknown";
}

std::string_view to_string(MatchMode mode) {
  return mode == MatchMode::exact ? "exact" : "fuzzy";
}

MatchMode match_mode_from_string(std::string_view name) {
  if (name == "exact" || name == "exact-normalized") return MatchMode::exact;
  if (name == "fuzzy") return MatchMode::fuzzy;
  throw ConfigError("unknown match mode '" + std::string(name) + "'");
}

std::string_view to_string(LineDecision decision) {
  switch (decision) {
    case LineDecision::matched:
      return "matched";
    case LineDecision::matched_fuzzy:
      return "matched-fuzzy";
    case LineDecision::duplicate:
      return "duplicate";
    case LineDecision::hallucinated:
      return "hallucinated";
  }
  return "unknown";
}

ParseRules default_parse_rules() {
  ParseRules rules;
  rules.refusal_phrases = {
      "goes against OpenAI's use case policy",
      "I cannot fulfill this request",
      "I can't fulfill this request",
      "I'm unable to fulfill this request",
      "I cannot assist with",
      "I can't assist with",
  };
  return rules;
}

void validate(const ParseRules& rules) {
  if (rules.refusal_phrases.empty()) throw ConfigError("parse rules: refusal list is empty");
  if (rules.fuzzy_threshold < 0.0 || rules.fuzzy_threshold > 1.0) {
    throw ConfigError("parse rules: fuzzy_threshold must lie in [0, 1]");
  }
}

std::vector<std::string> load_refusal_phrases(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::string> phrases;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    auto start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    phrases.push_back(line.substr(start));
  }
  return phrases;
}

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

// Length of a leading enumeration token including the whitespace after it,
// or 0 if the line does not start with one.
std::size_t enumeration_prefix(std::string_view s) {
  std::size_t i = 0;
  if (!s.empty() && (s[0] == '-' || s[0] == '*')) {
    i = 1;
  } else {
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i == 0 || i >= s.size() || (s[i] != '.' && s[i] != ')')) return 0;
    ++i;
  }
  if (i >= s.size() || !is_space(s[i])) return 0;
  while (i < s.size() && is_space(s[i])) ++i;
  return i;
}

constexpr std::array<std::string_view, 7> kQuotes = {"'", "\"", "`", "‘", "’",
                                                     "“", "”"};

std::size_t quote_prefix(std::string_view s) {
  for (auto q : kQuotes) {
    if (s.starts_with(q)) return q.size();
  }
  return 0;
}

std::size_t quote_suffix(std::string_view s) {
  for (auto q : kQuotes) {
    if (s.ends_with(q)) return q.size();
  }
  return 0;
}

std::string collapse(std::string_view s, bool* changed) {
  std::string out;
  out.reserve(s.size());
  bool pending = false;
  for (char c : s) {
    if (is_space(c)) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(c);
  }
  if (changed != nullptr) *changed = out != s;
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Peels quote pairs until none is left, so a quoted title that carries its
// own quotes reduces to the same key as the bare title.
std::string_view strip_quotes(std::string_view s, int* fixes) {
  bool stripped = false;
  while (true) {
    auto qp = quote_prefix(s);
    auto qs = quote_suffix(s);
    if (qp == 0 || qs == 0 || qp + qs > s.size()) break;
    s = trim(s.substr(qp, s.size() - qp - qs));
    stripped = true;
  }
  if (stripped && fixes != nullptr) ++*fixes;
  return s;
}

// Applies the per-line rules to an already nonblank line.
OutputLine normalize_line(std::string_view raw) {
  OutputLine line;
  std::string_view s = trim(raw);
  if (s.size() != raw.size()) ++line.fixes;
  std::string_view unstripped = s;
  if (auto n = enumeration_prefix(s); n > 0) {
    s.remove_prefix(n);
    s = trim(s);
    ++line.fixes;
  }
  s = strip_quotes(s, &line.fixes);
  bool changed = false;
  line.text = collapse(s, &changed);
  if (changed) ++line.fixes;
  line.key = lower(line.text);
  if (unstripped.size() != s.size()) {
    auto alt = lower(collapse(strip_quotes(unstripped, nullptr), nullptr));
    if (alt != line.key) line.alt_key = std::move(alt);
  }
  return line;
}

}  // namespace

std::vector<OutputLine> normalize_output(std::string_view raw, std::size_t* n_fixes) {
  std::vector<OutputLine> lines;
  std::size_t fixes = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < raw.size()) {
    const auto nl = raw.find('\n', pos);
    const auto end = nl == std::string_view::npos ? raw.size() : nl;
    const std::string_view piece = raw.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (trim(piece).empty()) {
      ++fixes;
      continue;
    }
    OutputLine line = normalize_line(piece);
    line.line_no = line_no;
    fixes += static_cast<std::size_t>(line.fixes);
    if (line.text.empty()) continue;
    lines.push_back(std::move(line));
  }
  if (n_fixes != nullptr) *n_fixes = fixes;
  return lines;
}

std::string title_key(std::string_view title) {
  return lower(collapse(strip_quotes(trim(title), nullptr), nullptr));
}

bool detect_refusal(std::string_view raw, const ParseRules& rules) {
  const std::string haystack = lower(raw);
  return std::any_of(rules.refusal_phrases.begin(), rules.refusal_phrases.end(),
                     [&](const std::string& phrase) {
                       return !phrase.empty() && haystack.find(lower(phrase)) != std::string::npos;
                     });
}

double normalized_edit_similarity(std::string_view a, std::string_view b) {
  if (a.empty() && b.empty()) return 1.0;
  std::vector<std::size_t> prev(b.size() + 1);
  std::vector<std::size_t> cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  const double longest = static_cast<double>(std::max(a.size(), b.size()));
  return 1.0 - static_cast<double>(prev[b.size()]) / longest;
}

namespace {

// "spider-man 2" -> {"2"}; fuzzy matches must agree on these.
std::vector<std::string_view> digit_runs(std::string_view key) {
  std::vector<std::string_view> runs;
  std::size_t i = 0;
  while (i < key.size()) {
    if (key[i] >= '0' && key[i] <= '9') {
      std::size_t j = i;
      while (j < key.size() && key[j] >= '0' && key[j] <= '9') ++j;
      runs.push_back(key.substr(i, j - i));
      i = j;
    } else {
      ++i;
    }
  }
  return runs;
}

}  // namespace

ParsedRanking match_candidates(std::span<const OutputLine> lines,
                               std::span<const std::string> candidate_titles,
                               const ParseRules& rules) {
  const std::size_t m = candidate_titles.size();
  std::vector<std::string> keys;
  keys.reserve(m);
  std::unordered_multimap<std::string, std::size_t> by_key;
  for (std::size_t i = 0; i < m; ++i) {
    keys.push_back(title_key(candidate_titles[i]));
    by_key.emplace(keys.back(), i);
  }

  ParsedRanking out;
  std::vector<char> used(m, 0);
  for (const auto& line : lines) {
    ++out.n_content_lines;
    LineTrace trace{line.line_no, line.text, LineDecision::hallucinated, -1, 0.0};

    // Lowest-index unused candidate with an identical key.
    std::size_t best = m;
    bool any_exact = false;
    auto [lo, hi] = by_key.equal_range(line.key);
    if (lo == hi && !line.alt_key.empty()) {
      // The stripped "enumeration" may have been part of the title itself.
      std::tie(lo, hi) = by_key.equal_range(line.alt_key);
    }
    for (auto it = lo; it != hi; ++it) {
      any_exact = true;
      if (!used[it->second] && it->second < best) best = it->second;
    }
    if (best < m) {
      trace.decision = LineDecision::matched;
      trace.similarity = 1.0;
    } else if (any_exact) {
      trace.decision = LineDecision::duplicate;
    } else if (rules.mode == MatchMode::fuzzy) {
      double best_sim = -1.0;
      const auto line_digits = digit_runs(line.key);
      for (std::size_t i = 0; i < m; ++i) {
        if (used[i] || digit_runs(keys[i]) != line_digits) continue;
        double sim = normalized_edit_similarity(line.key, keys[i]);
        if (sim > best_sim) {
          best_sim = sim;
          best = i;
        }
      }
      if (best < m && best_sim >= rules.fuzzy_threshold) {
        trace.decision = LineDecision::matched_fuzzy;
        trace.similarity = best_sim;
      } else {
        best = m;
      }
    }

    if (best < m) {
      used[best] = 1;
      trace.candidate = static_cast<int>(best);
      out.ranked.push_back(static_cast<int>(best));
    } else {
      ++out.n_hallucinated;
    }
    out.trace.push_back(std::move(trace));
  }
  out.n_missing = m - out.ranked.size();
  out.status = out.ranked.empty() ? ParseStatus::skipped_empty : ParseStatus::ok;
  return out;
}

ParsedRanking parse_completion(std::string_view raw, std::span<const std::string> candidate_titles,
                               const ParseRules& rules) {
  if (detect_refusal(raw, rules)) {
    ParsedRanking out;
    out.status = ParseStatus::skipped_refusal;
    out.n_missing = candidate_titles.size();
    return out;
  }
  std::size_t fixes = 0;
  auto lines = normalize_output(raw, &fixes);
  auto out = match_candidates(lines, candidate_titles, rules);
  out.n_format_fixes = fixes;
  return out;
}

}  // namespace xdrec
