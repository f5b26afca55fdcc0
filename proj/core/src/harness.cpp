#include "xdrec/harness.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include "xdrec/errors.hpp"

namespace xdrec {

using nlohmann::json;
namespace fs = std::filesystem;

MissingCompletionsError::MissingCompletionsError(std::vector<std::string> hashes)
    : ProviderError([&] {
        std::string msg = fmt::format("replay cache is missing {} completion(s):", hashes.size());
        for (const auto& h : hashes) msg += "\n  " + h;
        return msg;
      }()),
      hashes_(std::move(hashes)) {}

std::map<std::string, std::string> default_domain_groups() {
  return {{"Movies and TV", "Movies, Music & Games"},
          {"CDs and Vinyl", "Movies, Music & Games"},
          {"Video Games", "Movies, Music & Games"},
          {"Electronics", "Electronics"}};
}

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace {

fs::path resolve_path(const json& j, const char* key, const fs::path& base) {
  if (!j.contains(key) || j[key].is_null()) return {};
  fs::path p = j[key].get<std::string>();
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal();
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

NoiseConfig noise_from_json(const json& j) {
  NoiseConfig n;
  read(j, "numbering", n.numbering);
  read(j, "indent", n.indent);
  read(j, "quotes", n.quotes);
  read(j, "blank_lines", n.blank_lines);
  read(j, "paraphrase", n.paraphrase);
  read(j, "drop", n.drop);
  read(j, "hallucinate", n.hallucinate);
  read(j, "refusal", n.refusal);
  return n;
}

json noise_to_json(const NoiseConfig& n) {
  return {{"numbering", n.numbering}, {"indent", n.indent},   {"quotes", n.quotes},
          {"blank_lines", n.blank_lines}, {"paraphrase", n.paraphrase}, {"drop", n.drop},
          {"hallucinate", n.hallucinate}, {"refusal", n.refusal}};
}

ProviderConfig provider_from_json(const json& j, const fs::path& base) {
  ProviderConfig p;
  if (j.contains("kind")) p.kind = provider_kind_from_string(j["kind"].get<std::string>());
  read(j, "endpoint", p.endpoint);
  read(j, "model", p.model);
  read(j, "temperature", p.temperature);
  read(j, "max_retries", p.max_retries);
  read(j, "requests_per_minute", p.requests_per_minute);
  p.cache_dir = resolve_path(j, "cache_dir", base);
  read(j, "api_key_env", p.api_key_env);
  read(j, "seed", p.seed);
  p.replay_dir = resolve_path(j, "replay_dir", base);
  if (j.contains("inner_kind")) {
    p.inner_kind = provider_kind_from_string(j["inner_kind"].get<std::string>());
  }
  if (j.contains("noise")) p.noise = noise_from_json(j["noise"]);
  read(j, "timeout_seconds", p.timeout_seconds);
  read(j, "backoff_initial_seconds", p.backoff_initial_seconds);
  return p;
}

json provider_to_json(const ProviderConfig& p) {
  return {{"kind", to_string(p.kind)},
          {"endpoint", p.endpoint},
          {"model", p.model},
          {"temperature", p.temperature},
          {"max_retries", p.max_retries},
          {"requests_per_minute", p.requests_per_minute},
          {"cache_dir", p.cache_dir.string()},
          {"api_key_env", p.api_key_env},
          {"seed", p.seed},
          {"replay_dir", p.replay_dir.string()},
          {"inner_kind", to_string(p.inner_kind)},
          {"noise", noise_to_json(p.noise)},
          {"timeout_seconds", p.timeout_seconds},
          {"backoff_initial_seconds", p.backoff_initial_seconds}};
}

DomainSource domain_from_json(const json& j, const fs::path& base) {
  DomainSource d;
  read(j, "domain", d.domain_id);
  d.reviews = resolve_path(j, "reviews", base);
  d.metadata = resolve_path(j, "metadata", base);
  return d;
}

std::map<std::string, std::string> read_group_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  json j = json::parse(is, nullptr, false);
  if (!j.is_object()) throw FormatError(path.string() + ": group map must be a JSON object");
  return j.get<std::map<std::string, std::string>>();
}

}  // namespace

ExperimentConfig config_from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  try {
    read(doc, "name", c.name);
    if (doc.contains("source")) c.source = domain_from_json(doc["source"], base_dir);
    if (doc.contains("target")) c.target = domain_from_json(doc["target"], base_dir);
    if (doc.contains("synthetic") && !doc["synthetic"].is_null()) {
      const auto& s = doc["synthetic"];
      SyntheticSpec spec;
      read(s, "n_users", spec.n_users);
      read(s, "n_items_per_domain", spec.n_items_per_domain);
      read(s, "n_domains", spec.n_domains);
      read(s, "preference_dim", spec.preference_dim);
      read(s, "rating_noise", spec.rating_noise);
      read(s, "seed", spec.rng_seed);
      read(s, "purchases_per_domain", spec.purchases_per_domain);
      read(s, "source_index", c.synthetic_source);
      read(s, "target_index", c.synthetic_target);
      c.synthetic = spec;
    }
    if (doc.contains("taskgen")) {
      const auto& t = doc["taskgen"];
      read(t, "history_len", c.taskgen.history_len);
      read(t, "candidate_size", c.taskgen.candidate_size);
      read(t, "n_ground_truth", c.taskgen.n_ground_truth);
      read(t, "n_repeats", c.taskgen.n_repeats);
    }
    c.filter.history_len_threshold = c.taskgen.history_len;
    if (doc.contains("filter")) {
      const auto& f = doc["filter"];
      read(f, "rating_floor", c.filter.rating_floor);
      read(f, "min_user_purchases", c.filter.min_user_purchases);
      read(f, "min_item_buyers", c.filter.min_item_buyers);
      read(f, "history_len_threshold", c.filter.history_len_threshold);
      read(f, "active_fixed_point", c.filter.active_fixed_point);
    }
    if (doc.contains("provider")) c.provider = provider_from_json(doc["provider"], base_dir);
    if (doc.contains("guidance_provider") && !doc["guidance_provider"].is_null()) {
      c.guidance_provider = provider_from_json(doc["guidance_provider"], base_dir);
    }
    if (doc.contains("variants")) {
      for (const auto& v : doc["variants"]) {
        Variant variant;
        variant.name = v.at("name").get<std::string>();
        read(v, "include_history", variant.flags.include_history);
        read(v, "include_guidance", variant.flags.include_guidance);
        c.variants.push_back(std::move(variant));
      }
    }
    read(doc, "baseline", c.baseline_variant);
    if (doc.contains("prompt")) {
      const auto& p = doc["prompt"];
      c.templates_dir = resolve_path(p, "templates_dir", base_dir);
      read(p, "max_chars", c.max_prompt_chars);
    }
    if (doc.contains("parse")) {
      const auto& p = doc["parse"];
      c.refusals_file = resolve_path(p, "refusals_file", base_dir);
      if (p.contains("refusal_phrases")) {
        c.parse.refusal_phrases = p["refusal_phrases"].get<std::vector<std::string>>();
      }
      if (p.contains("match_mode")) {
        c.parse.mode = match_mode_from_string(p["match_mode"].get<std::string>());
      }
      read(p, "fuzzy_threshold", c.parse.fuzzy_threshold);
    }
    c.domain_groups = default_domain_groups();
    if (doc.contains("domain_groups")) {
      const auto& g = doc["domain_groups"];
      if (g.is_string()) {
        c.domain_groups = read_group_file(resolve_path(doc, "domain_groups", base_dir));
      } else {
        c.domain_groups = g.get<std::map<std::string, std::string>>();
      }
    }
    read(doc, "max_users", c.max_users);
    read(doc, "seed", c.seed);
    if (doc.contains("output_dir")) c.output_dir = resolve_path(doc, "output_dir", base_dir);
    c.tasks_file = resolve_path(doc, "tasks_file", base_dir);
    read(doc, "parallelism", c.parallelism);
    if (doc.contains("matrix")) {
      const auto& m = doc["matrix"];
      read(m, "history_len", c.matrix.history_len);
      read(m, "candidate_size", c.matrix.candidate_size);
      read(m, "guidance", c.matrix.guidance);
      if (m.contains("providers")) {
        for (const auto& p : m["providers"]) {
          c.matrix.providers.push_back(provider_from_json(p, base_dir));
        }
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!c.refusals_file.empty()) c.parse.refusal_phrases = load_refusal_phrases(c.refusals_file);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json doc = json::parse(is, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path.string() + ": invalid JSON");
  return config_from_json(doc, fs::absolute(path).parent_path());
}

json config_to_json(const ExperimentConfig& c) {
  json doc;
  doc["name"] = c.name;
  auto domain = [](const DomainSource& d) {
    return json{{"domain", d.domain_id},
                {"reviews", d.reviews.string()},
                {"metadata", d.metadata.string()}};
  };
  doc["source"] = domain(c.source);
  doc["target"] = domain(c.target);
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    doc["synthetic"] = {{"n_users", s.n_users},
                        {"n_items_per_domain", s.n_items_per_domain},
                        {"n_domains", s.n_domains},
                        {"preference_dim", s.preference_dim},
                        {"rating_noise", s.rating_noise},
                        {"seed", s.rng_seed},
                        {"purchases_per_domain", s.purchases_per_domain},
                        {"source_index", c.synthetic_source},
                        {"target_index", c.synthetic_target}};
  }
  doc["filter"] = {{"rating_floor", c.filter.rating_floor},
                   {"min_user_purchases", c.filter.min_user_purchases},
                   {"min_item_buyers", c.filter.min_item_buyers},
                   {"history_len_threshold", c.filter.history_len_threshold},
                   {"active_fixed_point", c.filter.active_fixed_point}};
  doc["taskgen"] = {{"history_len", c.taskgen.history_len},
                    {"candidate_size", c.taskgen.candidate_size},
                    {"n_ground_truth", c.taskgen.n_ground_truth},
                    {"n_repeats", c.taskgen.n_repeats}};
  doc["provider"] = provider_to_json(c.provider);
  if (c.guidance_provider) doc["guidance_provider"] = provider_to_json(*c.guidance_provider);
  doc["variants"] = json::array();
  for (const auto& v : c.variants) {
    doc["variants"].push_back({{"name", v.name},
                               {"include_history", v.flags.include_history},
                               {"include_guidance", v.flags.include_guidance}});
  }
  doc["baseline"] = c.baseline_variant;
  doc["prompt"] = {{"templates_dir", c.templates_dir.string()}, {"max_chars", c.max_prompt_chars}};
  doc["parse"] = {{"refusal_phrases", c.parse.refusal_phrases},
                  {"match_mode", to_string(c.parse.mode)},
                  {"fuzzy_threshold", c.parse.fuzzy_threshold}};
  doc["domain_groups"] = c.domain_groups;
  doc["max_users"] = c.max_users;
  doc["seed"] = c.seed;
  doc["output_dir"] = c.output_dir.string();
  doc["tasks_file"] = c.tasks_file.string();
  doc["parallelism"] = c.parallelism;
  if (!c.matrix.empty()) {
    json m = {{"history_len", c.matrix.history_len},
              {"candidate_size", c.matrix.candidate_size},
              {"guidance", c.matrix.guidance},
              {"providers", json::array()}};
    for (const auto& p : c.matrix.providers) m["providers"].push_back(provider_to_json(p));
    doc["matrix"] = m;
  }
  return doc;
}

void resolve_defaults(ExperimentConfig& c) {
  if (c.variants.empty()) {
    c.variants = {{"wo_info", {false, false}}, {"w_info", {true, true}}};
    c.baseline_variant = "wo_info";
  }
  const Rng master(c.seed);
  c.taskgen.rng_seed = master.split("taskgen").seed();
  c.provider.seed = master.split("provider").seed();
  if (c.provider.cache_dir.empty() && c.provider.kind != ProviderKind::replay) {
    c.provider.cache_dir = c.output_dir / "cache";
  }
  if (c.guidance_provider) {
    c.guidance_provider->seed = master.split("guidance").seed();
    if (c.guidance_provider->cache_dir.empty() &&
        c.guidance_provider->kind != ProviderKind::replay) {
      c.guidance_provider->cache_dir = c.output_dir / "cache";
    }
  }
}

void validate(const ExperimentConfig& c) {
  validate(c.filter);
  validate(c.taskgen);
  validate(c.provider);
  if (c.guidance_provider) validate(*c.guidance_provider);
  validate(c.parse);
  if (c.max_users < 1) throw ConfigError("max_users must be >= 1");
  if (c.parallelism < 1) throw ConfigError("parallelism must be >= 1");
  if (c.variants.empty()) throw ConfigError("at least one variant is required");
  std::set<std::string> names;
  for (const auto& v : c.variants) {
    if (!names.insert(v.name).second) throw ConfigError("duplicate variant " + v.name);
  }
  if (!c.baseline_variant.empty() && !names.contains(c.baseline_variant)) {
    throw ConfigError("baseline variant '" + c.baseline_variant + "' is not declared");
  }
  if (c.tasks_file.empty() && !c.synthetic) {
    for (const auto* d : {&c.source, &c.target}) {
      if (d->domain_id.empty()) throw ConfigError("source/target domain ids are required");
      for (const auto& p : {d->reviews, d->metadata}) {
        if (p.empty() || !fs::exists(p)) {
          throw ConfigError("data file does not exist: '" + p.string() + "'");
        }
      }
    }
  }
  if (!c.tasks_file.empty() && !fs::exists(c.tasks_file)) {
    throw ConfigError("tasks file does not exist: " + c.tasks_file.string());
  }
  if (c.synthetic) {
    validate(*c.synthetic);
    const auto n = static_cast<int>(c.synthetic->n_domains);
    if (c.synthetic_source < 0 || c.synthetic_source >= n || c.synthetic_target < 0 ||
        c.synthetic_target >= n || c.synthetic_source == c.synthetic_target) {
      throw ConfigError("synthetic source/target indices must be distinct domains");
    }
  }
}

std::vector<ExperimentConfig> expand_matrix(const ExperimentConfig& config) {
  std::vector<ExperimentConfig> cells = {config};
  cells.front().matrix = {};
  if (cells.front().variants.empty()) {
    cells.front().variants = {{"wo_info", {false, false}}, {"w_info", {true, true}}};
    cells.front().baseline_variant = "wo_info";
  }
  auto sweep = [&](auto values, auto apply) {
    if (values.empty()) return;
    std::vector<ExperimentConfig> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        ExperimentConfig c = cell;
        apply(c, v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  };
  sweep(config.matrix.history_len, [](ExperimentConfig& c, int v) {
    c.taskgen.history_len = v;
    c.filter.history_len_threshold = v;
    c.name += fmt::format("_h{}", v);
  });
  sweep(config.matrix.candidate_size, [](ExperimentConfig& c, int v) {
    c.taskgen.candidate_size = v;
    c.name += fmt::format("_m{}", v);
  });
  sweep(config.matrix.guidance, [](ExperimentConfig& c, bool v) {
    for (auto& variant : c.variants) {
      if (variant.name != c.baseline_variant) variant.flags.include_guidance = v;
    }
    c.name += v ? "_guided" : "_unguided";
  });
  sweep(config.matrix.providers, [](ExperimentConfig& c, const ProviderConfig& p) {
    c.provider = p;
    c.name += "_" + p.model_label();
  });
  if (!config.matrix.empty()) {
    for (auto& c : cells) c.output_dir = config.output_dir / c.name;
  }
  return cells;
}

std::vector<std::string> sample_users(std::vector<std::string> users, std::size_t max_users,
                                      Rng& rng) {
  std::sort(users.begin(), users.end());
  if (users.size() > max_users) {
    for (std::size_t k = 0; k < max_users; ++k) {
      auto j = k + static_cast<std::size_t>(rng.uniform(users.size() - k));
      std::swap(users[k], users[j]);
    }
    users.resize(max_users);
    std::sort(users.begin(), users.end());
  }
  return users;
}

PreparedData prepare_cohort(const ExperimentConfig& config) {
  PreparedData data;
  if (config.synthetic) {
    auto domains = generate_synthetic(*config.synthetic);
    data.source = std::move(domains.at(static_cast<std::size_t>(config.synthetic_source)));
    data.target = std::move(domains.at(static_cast<std::size_t>(config.synthetic_target)));
    if (!config.source.domain_id.empty()) data.source.domain_id = config.source.domain_id;
    if (!config.target.domain_id.empty()) data.target.domain_id = config.target.domain_id;
  } else {
    auto load = [&](const DomainSource& d) {
      auto ds = load_metadata(d.metadata, load_reviews(d.reviews, d.domain_id));
      spdlog::info("loaded {}: {} interactions, {} titled items ({} lines skipped, {} untitled)",
                   d.domain_id, ds.interactions.size(), ds.catalog.size(), ds.stats.skipped_lines,
                   ds.stats.dropped_untitled);
      return ds;
    };
    data.source = load(config.source);
    data.target = load(config.target);
  }
  for (auto* ds : {&data.source, &data.target}) {
    auto it = config.domain_groups.find(ds->domain_id);
    if (it != config.domain_groups.end()) {
      ds->group_id = it->second;
    } else if (ds->group_id.empty()) {
      ds->group_id = "unknown";
    }
  }
  data.filtered = run_filter_pipeline(data.source, data.target, config.filter);
  return data;
}

std::size_t RunManifest::count(std::string_view status_name) const {
  return static_cast<std::size_t>(std::count_if(
      ledger.begin(), ledger.end(), [&](const LedgerEntry& e) { return e.status == status_name; }));
}

json manifest_to_json(const RunManifest& m) {
  json stages = json::array();
  for (const auto& s : m.filter_stages) {
    stages.push_back({{"stage", s.stage},
                      {"domain", s.domain},
                      {"users", s.users},
                      {"items", s.items},
                      {"interactions", s.interactions}});
  }
  json ledger = json::array();
  for (const auto& e : m.ledger) {
    ledger.push_back({{"user_id", e.user_id}, {"status", e.status}, {"reason", e.reason}});
  }
  json doc = {{"status", m.status},
              {"error", m.error},
              {"config", m.config},
              {"dataset_digests", m.dataset_digests},
              {"task_set_digest", m.task_set_digest},
              {"variant_task_digests", m.variant_task_digests},
              {"filter_stages", stages},
              {"cohort_users", m.cohort_users},
              {"sampled_users", m.sampled_users},
              {"ledger", ledger},
              {"counts",
               {{"ok", m.count("ok")}, {"skipped", m.count("skipped")},
                {"errored", m.count("errored")}}},
              {"provider",
               {{"requests", m.provider_stats.requests},
                {"provider_calls", m.provider_stats.provider_calls},
                {"cache_hits", m.provider_stats.cache_hits},
                {"retries", m.provider_stats.retries}}},
              {"wall_clock_seconds", m.wall_clock_seconds}};
  if (m.guidance) {
    doc["guidance"] = {{"text", m.guidance->text},
                       {"fallback", m.guidance->fallback},
                       {"fallback_reason", m.guidance->fallback_reason}};
  }
  return doc;
}

TaskBuild build_tasks(const ExperimentConfig& config) {
  TaskBuild build;
  if (!config.tasks_file.empty()) {
    build.tasks = read_tasks_jsonl(config.tasks_file);
    for (const auto& t : build.tasks) {
      validate(t, static_cast<std::size_t>(config.taskgen.n_ground_truth));
      build.sampled_users.push_back(t.user_id);
    }
    return build;
  }
  build.data = prepare_cohort(config);
  Rng rng = Rng(config.seed).split("sample_users");
  build.sampled_users = sample_users(build.data->filtered.cohort.user_ids(),
                                     static_cast<std::size_t>(config.max_users), rng);
  auto set = generate_tasks(build.data->filtered.cohort, config.taskgen, &build.sampled_users);
  build.tasks = std::move(set.tasks);
  build.skipped = std::move(set.skipped);
  return build;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

void parallel_for(std::size_t n, int parallelism, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(parallelism, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

struct ItemOutcome {
  std::optional<MetricVector> metrics;
  ParseStatus status = ParseStatus::skipped_empty;
  std::size_t missing = 0;
  std::size_t hallucinated = 0;
  std::size_t content_lines = 0;
  std::size_t shown = 0;
  std::string error;
  std::string missing_hash;
};

std::string answer_key_id(const CdrTask& task, std::size_t repeat) {
  return fmt::format("{}#{}", task.user_id, repeat);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

std::string report_title(const ExperimentConfig& config, const std::vector<CdrTask>& tasks) {
  if (tasks.empty()) return config.name;
  const auto& src = tasks.front().source_domain_id;
  const auto& tgt = tasks.front().target_domain_id;
  auto group = [&](const std::string& d) {
    auto it = config.domain_groups.find(d);
    return it == config.domain_groups.end() ? std::string() : it->second;
  };
  std::string gap;
  if (!group(src).empty() && !group(tgt).empty()) {
    gap = group(src) == group(tgt) ? " (same sub-group)" : " (different sub-groups)";
  }
  return fmt::format("{}: {} → {}{}, model {}", config.name, src, tgt, gap,
                     config.provider.model_label());
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& input, std::shared_ptr<Clock> clock) {
  const auto wall_start = std::chrono::steady_clock::now();
  ExperimentConfig config = input;
  resolve_defaults(config);
  validate(config);
  if (!clock) clock = std::make_shared<SystemClock>();

  ExperimentResult result;
  auto& manifest = result.manifest;
  manifest.config = config_to_json(config);
  fs::create_directories(config.output_dir);

  auto finish_manifest = [&] {
    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    write_text(config.output_dir / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
  };

  try {
    TaskBuild build = build_tasks(config);
    if (build.data) {
      manifest.dataset_digests = {{"source", dataset_digest(build.data->source)},
                                  {"target", dataset_digest(build.data->target)}};
      manifest.filter_stages = build.data->filtered.stages;
      manifest.cohort_users = build.data->filtered.cohort.users.size();
    }
    manifest.sampled_users = build.sampled_users;
    for (const auto& s : build.skipped) manifest.ledger.push_back({s.user_id, "skipped", s.reason});
    result.tasks = std::move(build.tasks);
    const auto& tasks = result.tasks;
    manifest.task_set_digest = task_set_digest(tasks);
    write_tasks_jsonl(tasks, config.output_dir / "tasks.jsonl");
    if (tasks.empty()) throw EvaluationError("no tasks could be generated for this configuration");

    const PromptTemplates templates =
        config.templates_dir.empty() ? default_templates() : load_templates(config.templates_dir);

    auto keys = std::make_shared<AnswerKeyRegistry>();
    Gateway gateway(config.provider, make_provider(config.provider, keys), clock);
    std::optional<Gateway> guidance_gateway;
    if (config.guidance_provider) {
      guidance_gateway.emplace(*config.guidance_provider,
                               make_provider(*config.guidance_provider, keys), clock);
    }

    const bool wants_guidance = std::any_of(config.variants.begin(), config.variants.end(),
                                            [](const auto& v) { return v.flags.include_guidance; });
    std::string guidance_text;
    std::set<std::string> missing;
    if (wants_guidance) {
      GuidanceCache guidance_cache;
      GuidanceRequest request{tasks.front().source_domain_id, tasks.front().target_domain_id,
                              templates.meta_prompt};
      try {
        manifest.guidance = make_guidance(request, guidance_gateway ? *guidance_gateway : gateway,
                                          guidance_cache, templates);
      } catch (const ReplayMissError& e) {
        // Keep going so the error lists every missing completion at once.
        missing.insert(e.prompt_hash());
        manifest.guidance = Guidance{fallback_guidance(templates), true, e.what()};
      }
      guidance_text = manifest.guidance->text;
    }

    std::size_t n_items = 0;
    std::size_t n_repeats = 0;
    std::vector<std::pair<std::size_t, std::size_t>> items;  // (task, repeat)
    std::vector<std::size_t> first_item(tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      first_item[t] = items.size();
      n_repeats = std::max(n_repeats, tasks[t].n_repeats());
      for (std::size_t r = 0; r < tasks[t].n_repeats(); ++r) {
        keys->put(answer_key_id(tasks[t], r),
                  {tasks[t].presented_titles(r), tasks[t].ground_truth_positions(r)});
        items.emplace_back(t, r);
      }
    }
    n_items = items.size();

    std::map<std::string, std::vector<ItemOutcome>> outcomes;
    for (const auto& variant : config.variants) {
      manifest.variant_task_digests[variant.name] = task_set_digest(tasks);
      auto& out = outcomes[variant.name];
      out.resize(n_items);
      spdlog::info("variant {}: {} completions", variant.name, n_items);
      parallel_for(n_items, config.parallelism, [&](std::size_t i) {
        const auto& task = tasks[items[i].first];
        const auto repeat = items[i].second;
        auto& o = out[i];
        try {
          auto prompt = build_prompt(task, repeat, guidance_text, variant.flags, templates,
                                     config.max_prompt_chars);
          auto completion = gateway.complete({prompt.text, answer_key_id(task, repeat)});
          auto presented = task.presented_titles(repeat);
          auto parsed = parse_completion(completion.raw_text, presented, config.parse);
          o.status = parsed.status;
          if (parsed.status == ParseStatus::ok) {
            auto gt = task.ground_truth_positions(repeat);
            o.metrics = compute_metrics(parsed.ranked, gt);
            o.missing = parsed.n_missing;
            o.hallucinated = parsed.n_hallucinated;
            o.content_lines = parsed.n_content_lines;
            o.shown = presented.size();
          }
        } catch (const ReplayMissError& e) {
          o.error = e.what();
          o.missing_hash = e.prompt_hash();
        } catch (const Error& e) {
          o.error = e.what();
        }
      });
    }
    manifest.provider_stats = gateway.stats();

    for (const auto& [_, out] : outcomes) {
      for (const auto& o : out) {
        if (!o.missing_hash.empty()) missing.insert(o.missing_hash);
      }
    }
    if (guidance_gateway) {
      auto g = guidance_gateway->stats();
      manifest.provider_stats.requests += g.requests;
      manifest.provider_stats.provider_calls += g.provider_calls;
      manifest.provider_stats.cache_hits += g.cache_hits;
      manifest.provider_stats.retries += g.retries;
    }

    // Per-user ledger across all variants and repeats.
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      std::string error;
      bool any_ok = false;
      for (const auto& [_, out] : outcomes) {
        for (std::size_t r = 0; r < tasks[t].n_repeats(); ++r) {
          const auto& o = out[first_item[t] + r];
          if (!o.error.empty() && error.empty()) error = o.error;
          any_ok = any_ok || o.metrics.has_value();
        }
      }
      if (!error.empty()) {
        manifest.ledger.push_back({tasks[t].user_id, "errored", error});
      } else if (!any_ok) {
        manifest.ledger.push_back({tasks[t].user_id, "skipped", "every completion was refused or empty"});
      } else {
        manifest.ledger.push_back({tasks[t].user_id, "ok", ""});
      }
    }
    std::sort(manifest.ledger.begin(), manifest.ledger.end(),
              [](const auto& a, const auto& b) { return a.user_id < b.user_id; });

    if (!missing.empty()) throw MissingCompletionsError({missing.begin(), missing.end()});

    for (const auto& variant : config.variants) {
      const auto& out = outcomes[variant.name];
      std::vector<std::vector<std::optional<MetricVector>>> values(
          n_repeats, std::vector<std::optional<MetricVector>>(tasks.size()));
      std::size_t shown = 0, missing_items = 0, lines = 0, hallucinated = 0;
      for (std::size_t i = 0; i < n_items; ++i) {
        const auto& o = out[i];
        values[items[i].second][items[i].first] = o.metrics;
        shown += o.shown;
        missing_items += o.missing;
        lines += o.content_lines;
        hallucinated += o.hallucinated;
      }
      ReportRow row;
      row.name = variant.name;
      row.report = aggregate(values);
      row.report.mismatch_rate =
          shown == 0 ? 0.0 : static_cast<double>(missing_items) / static_cast<double>(shown);
      row.report.hallucination_rate =
          lines == 0 ? 0.0 : static_cast<double>(hallucinated) / static_cast<double>(lines);
      result.rows.push_back(std::move(row));
    }
    auto baseline = std::find_if(result.rows.begin(), result.rows.end(),
                                 [&](const auto& r) { return r.name == config.baseline_variant; });
    if (baseline != result.rows.end()) {
      const ReportRow base = *baseline;
      for (auto& row : result.rows) {
        if (row.name != base.name) compare_to_baseline(row, base);
      }
    }

    write_text(config.output_dir / "report.csv", report_csv(result.rows));
    write_text(config.output_dir / "report.md",
               report_markdown(result.rows, report_title(config, tasks)));
    finish_manifest();
  } catch (const std::exception& e) {
    manifest.status = "aborted";
    manifest.error = e.what();
    finish_manifest();
    throw;
  }
  return result;
}

std::vector<ExperimentResult> run_matrix(const ExperimentConfig& config) {
  std::vector<ExperimentResult> results;
  std::string summary;
  for (const auto& cell : expand_matrix(config)) {
    spdlog::info("matrix cell {}", cell.name);
    results.push_back(run_experiment(cell));
    std::istringstream csv(report_csv(results.back().rows));
    std::string line;
    bool header = true;
    while (std::getline(csv, line)) {
      if (header) {
        if (summary.empty()) summary = "cell," + line + "\n";
        header = false;
        continue;
      }
      summary += cell.name + "," + line + "\n";
    }
  }
  fs::create_directories(config.output_dir);
  write_text(config.output_dir / "summary.csv", summary);
  return results;
}

ExperimentResult recompute_report(const fs::path& run_dir, const fs::path& out_dir) {
  std::ifstream is(run_dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + run_dir.string());
  json manifest = json::parse(is, nullptr, false);
  if (!manifest.is_object() || !manifest.contains("config")) {
    throw FormatError("manifest.json is malformed");
  }
  ExperimentConfig config = config_from_json(manifest["config"]);
  config.tasks_file = run_dir / "tasks.jsonl";
  config.output_dir = out_dir;

  // Completions are read from the run's cache and never written back.
  auto to_replay = [&](ProviderConfig p) {
    p.replay_dir = fs::exists(run_dir / "cache") ? run_dir / "cache" : p.cache_dir;
    p.model = p.model_label();
    p.kind = ProviderKind::replay;
    p.cache_dir.clear();
    return p;
  };
  config.provider = to_replay(config.provider);
  if (config.guidance_provider) config.guidance_provider = to_replay(*config.guidance_provider);
  return run_experiment(config);
}

}  // namespace xdrec
