#pragma once

#include <filesystem>
#include <map>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "xdrec/taskgen.hpp"

namespace xdrec {

class Gateway;

// Section templates. Placeholders: {SOURCE} {TARGET} {HISTORY} {GUIDANCE}
// {CANDIDATES}; the guidance sentence also takes {FEATURES}.
struct PromptTemplates {
  std::string adaptation;
  std::string conditional;
  std::string guidance;
  std::string task_description;
  std::string meta_prompt;
  std::string guidance_sentence;
};

PromptTemplates default_templates();

// Reads <dir>/{adaptation,conditional,guidance,task_description,meta_prompt,
// guidance_sentence}.txt; files that are absent keep the default text.
PromptTemplates load_templates(const std::filesystem::path& dir);

// Replaces every {NAME} with values[NAME]; unknown placeholders stay as-is.
std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& values);

struct GuidanceRequest {
  std::string source_domain;
  std::string target_domain;
  std::string meta_prompt_template;
};

void validate(const GuidanceRequest& request);

struct Guidance {
  std::string text;
  bool fallback = false;
  std::string fallback_reason;
};

// Static guidance used when the provider fails or declines.
std::string fallback_guidance(const PromptTemplates& templates);

// Guidance text per (source, target, model); concurrent readers, single
// writer.
class GuidanceCache {
 public:
  [[nodiscard]] std::optional<Guidance> get(const std::string& source, const std::string& target,
                                            const std::string& model) const;
  void put(const std::string& source, const std::string& target, const std::string& model,
           Guidance guidance);

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::tuple<std::string, std::string, std::string>, Guidance> entries_;
};

// Asks the model for the features linking the two domains and wraps them
// in the guidance sentence. Falls back on provider error or refusal; a
// replay miss propagates.
Guidance make_guidance(const GuidanceRequest& request, Gateway& gateway, GuidanceCache& cache,
                       const PromptTemplates& templates);

struct PromptFlags {
  bool include_history = true;
  bool include_guidance = true;
};

struct PromptBundle {
  std::string task_domain_adaptation;
  std::string conditional_information;
  std::string recommendation_guidance;
  std::string task_description;
  bool include_history = true;
  bool include_guidance = true;
  std::string candidate_rendering;
};

struct RenderedPrompt {
  PromptBundle bundle;
  std::string text;
};

// 'A', 'B', 'C'
std::string render_history(const std::vector<std::string>& titles);
// 1. A\n2. B
std::string render_candidates(const std::vector<std::string>& titles);

inline constexpr std::size_t kDefaultMaxPromptChars = 24000;

// Sections are joined in fixed order (adaptation, conditional, guidance,
// task description), skipping empty ones. Throws PromptBudgetError when the
// rendered text exceeds max_chars.
RenderedPrompt build_prompt(const CdrTask& task, std::size_t shuffle_index,
                            std::string_view guidance, const PromptFlags& flags,
                            const PromptTemplates& templates,
                            std::size_t max_chars = kDefaultMaxPromptChars);

}  // namespace xdrec
