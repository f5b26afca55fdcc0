#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xdrec {

enum class ParseStatus { ok, skipped_refusal, skipped_empty };
enum class MatchMode { exact, fuzzy };

std::string_view to_string(ParseStatus status);
std::string_view to_string(MatchMode mode);
MatchMode match_mode_from_string(std::string_view name);

struct ParseRules {
  std::vector<std::string> refusal_phrases;
  MatchMode mode = MatchMode::exact;
  double fuzzy_threshold = 0.9;
};

ParseRules default_parse_rules();
void validate(const ParseRules& rules);

// One refusal phrase per line; blank lines and lines starting with '#' are
// ignored. Other fields keep their defaults.
std::vector<std::string> load_refusal_phrases(const std::filesystem::path& path);

struct OutputLine {
  std::string text;  // display form after format fixes
  std::string key;   // lowercased match key
  std::string alt_key;  // key without enumeration stripping, when it differs
  std::size_t line_no = 0;  // 1-based line in the raw text
  int fixes = 0;
};

// Format-mismatch repair: trim, drop blanks, strip enumeration tokens
// ("1.", "1)", "-", "*"), strip surrounding quotes, collapse whitespace.
// `n_fixes` (optional) receives the number of repair actions applied.
std::vector<OutputLine> normalize_output(std::string_view raw, std::size_t* n_fixes = nullptr);

// Match key of a candidate title: trim, strip a surrounding quote pair,
// collapse whitespace, lowercase. Enumeration tokens are left alone since
// they can belong to the title.
std::string title_key(std::string_view title);

// Case-insensitive search for any refusal phrase.
bool detect_refusal(std::string_view raw, const ParseRules& rules);

// 1 - levenshtein(a, b) / max(|a|, |b|); 1 for two empty strings.
double normalized_edit_similarity(std::string_view a, std::string_view b);

enum class LineDecision { matched, matched_fuzzy, duplicate, hallucinated };
std::string_view to_string(LineDecision decision);

struct LineTrace {
  std::size_t line_no = 0;
  std::string text;
  LineDecision decision = LineDecision::hallucinated;
  int candidate = -1;
  double similarity = 0.0;
};

struct ParsedRanking {
  ParseStatus status = ParseStatus::skipped_empty;
  std::vector<int> ranked;  // positions in the presented candidate list
  std::size_t n_hallucinated = 0;
  std::size_t n_missing = 0;
  std::size_t n_format_fixes = 0;
  std::size_t n_content_lines = 0;
  std::vector<LineTrace> trace;
};

// Content-mismatch handling: each line claims at most one still-unmatched
// candidate; unmatched lines count as hallucinated, unmentioned candidates
// as missing (they are not appended). Fuzzy matches also require the same
// digit runs, so numbered sequels never match each other.
ParsedRanking match_candidates(std::span<const OutputLine> lines,
                               std::span<const std::string> candidate_titles,
                               const ParseRules& rules);

// Refusal check, then normalize_output + match_candidates.
ParsedRanking parse_completion(std::string_view raw, std::span<const std::string> candidate_titles,
                               const ParseRules& rules);

}  // namespace xdrec
