#include "xdrec/prompting.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

#include "xdrec/errors.hpp"
#include "xdrec/llm.hpp"
#include "xdrec/parse.hpp"

namespace xdrec {

PromptTemplates default_templates() {
  PromptTemplates t;
  t.adaptation =
      "You are a recommender system for the {TARGET} domain. Your job is to re-rank a list of "
      "candidate {TARGET} items by how likely the user is to purchase each of them.";
  t.conditional =
      "The user has no purchase records in {TARGET}, but has bought the following {SOURCE} "
      "items, listed from the most recent purchase to the oldest: {HISTORY}.";
  t.guidance = "{GUIDANCE}";
  t.task_description =
      "Here is the candidate list of {TARGET} items:\n{CANDIDATES}\n\n"
      "Rank all of the candidates above from the most likely to the least likely to be "
      "purchased by the user. Output every candidate title exactly as written, one title per "
      "line, most likely first, with no numbering and no extra text.";
  t.meta_prompt =
      "A user's purchase history comes from the {SOURCE} domain and we want to recommend items "
      "from the {TARGET} domain. Summarize the key common features between {SOURCE} and "
      "{TARGET} products that should be considered for this cross-domain recommendation. "
      "Reply with a short comma-separated list of features and nothing else.";
  t.guidance_sentence =
      "You can consider factors such as {FEATURES}, or other feature connections and "
      "similarities between domains as information augmentation.";
  return t;
}

PromptTemplates load_templates(const std::filesystem::path& dir) {
  PromptTemplates t = default_templates();
  auto read = [&](const char* name, std::string& field) {
    const auto path = dir / (std::string(name) + ".txt");
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    field = ss.str();
    // A single trailing newline is a file convention, not template text.
    if (field.ends_with('\n')) field.pop_back();
    if (field.ends_with('\r')) field.pop_back();
  };
  read("adaptation", t.adaptation);
  read("conditional", t.conditional);
  read("guidance", t.guidance);
  read("task_description", t.task_description);
  read("meta_prompt", t.meta_prompt);
  read("guidance_sentence", t.guidance_sentence);
  return t;
}

std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        auto it = values.find(std::string(tmpl.substr(i + 1, close - i - 1)));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

void validate(const GuidanceRequest& request) {
  const auto& t = request.meta_prompt_template;
  if (t.find("{SOURCE}") == std::string::npos || t.find("{TARGET}") == std::string::npos) {
    throw ConfigError("meta prompt template must contain {SOURCE} and {TARGET}");
  }
}

std::string fallback_guidance(const PromptTemplates& templates) {
  return render_template(templates.guidance_sentence,
                         {{"FEATURES", std::string(kMockFeatureReply)}});
}

std::optional<Guidance> GuidanceCache::get(const std::string& source, const std::string& target,
                                           const std::string& model) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find({source, target, model});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void GuidanceCache::put(const std::string& source, const std::string& target,
                        const std::string& model, Guidance guidance) {
  std::unique_lock lock(mutex_);
  entries_.emplace(std::make_tuple(source, target, model), std::move(guidance));
}

namespace {

// Collapses a free-form feature reply into one clause without a trailing
// period, so it reads naturally inside the guidance sentence.
std::string clean_features(std::string_view raw) {
  auto lines = normalize_output(raw);
  std::string joined;
  for (const auto& line : lines) {
    if (!joined.empty()) joined += ", ";
    joined += line.text;
  }
  while (!joined.empty() && (joined.back() == '.' || joined.back() == ' ')) joined.pop_back();
  return joined;
}

}  // namespace

Guidance make_guidance(const GuidanceRequest& request, Gateway& gateway, GuidanceCache& cache,
                       const PromptTemplates& templates) {
  validate(request);
  const auto model = gateway.config().model_label();
  if (auto hit = cache.get(request.source_domain, request.target_domain, model)) return *hit;

  Guidance guidance;
  const auto prompt = render_template(
      request.meta_prompt_template,
      {{"SOURCE", request.source_domain}, {"TARGET", request.target_domain}});
  try {
    auto completion = gateway.complete({prompt, ""});
    auto features = clean_features(completion.raw_text);
    if (features.empty()) {
      guidance.fallback_reason = "empty guidance reply";
    } else if (detect_refusal(completion.raw_text, default_parse_rules())) {
      guidance.fallback_reason = "guidance request was refused";
    } else {
      guidance.text = render_template(templates.guidance_sentence, {{"FEATURES", features}});
    }
  } catch (const ReplayMissError&) {
    throw;  // a replay must reproduce the recorded guidance, not substitute it
  } catch (const ProviderError& e) {
    guidance.fallback_reason = e.what();
  }
  if (guidance.text.empty()) {
    spdlog::warn("using fallback guidance for {} -> {}: {}", request.source_domain,
                 request.target_domain, guidance.fallback_reason);
    guidance.text = fallback_guidance(templates);
    guidance.fallback = true;
  }
  cache.put(request.source_domain, request.target_domain, model, guidance);
  return guidance;
}

std::string render_history(const std::vector<std::string>& titles) {
  std::string out;
  for (std::size_t i = 0; i < titles.size(); ++i) {
    if (i > 0) out += ", ";
    out += '\'';
    out += titles[i];
    out += '\'';
  }
  return out;
}

std::string render_candidates(const std::vector<std::string>& titles) {
  std::string out;
  for (std::size_t i = 0; i < titles.size(); ++i) {
    if (i > 0) out += '\n';
    out += fmt::format("{}. {}", i + 1, titles[i]);
  }
  return out;
}

RenderedPrompt build_prompt(const CdrTask& task, std::size_t shuffle_index,
                            std::string_view guidance, const PromptFlags& flags,
                            const PromptTemplates& templates, std::size_t max_chars) {
  if (shuffle_index >= task.shuffles.size()) {
    throw TaskGenError(fmt::format("task {}: shuffle index {} out of range", task.user_id,
                                   shuffle_index));
  }
  RenderedPrompt out;
  auto& b = out.bundle;
  b.include_history = flags.include_history;
  b.include_guidance = flags.include_guidance;
  b.candidate_rendering = render_candidates(task.presented_titles(shuffle_index));

  std::map<std::string, std::string> values = {
      {"SOURCE", task.source_domain_id},
      {"TARGET", task.target_domain_id},
      {"HISTORY", render_history(task.history)},
      {"GUIDANCE", std::string(guidance)},
      {"CANDIDATES", b.candidate_rendering},
  };
  b.task_domain_adaptation = render_template(templates.adaptation, values);
  if (flags.include_history) b.conditional_information = render_template(templates.conditional, values);
  if (flags.include_guidance && !guidance.empty()) {
    b.recommendation_guidance = render_template(templates.guidance, values);
  }
  b.task_description = render_template(templates.task_description, values);

  for (const auto* section : {&b.task_domain_adaptation, &b.conditional_information,
                              &b.recommendation_guidance, &b.task_description}) {
    if (section->empty()) continue;
    if (!out.text.empty()) out.text += "\n\n";
    out.text += *section;
  }
  if (out.text.size() > max_chars) {
    throw PromptBudgetError(fmt::format("prompt for {} has {} characters, budget is {}",
                                        task.user_id, out.text.size(), max_chars));
  }
  return out;
}

}  // namespace xdrec
