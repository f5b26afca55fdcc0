#include "xdrec/corpus.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

#include "line_reader.hpp"
#include "xdrec/digest.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/rng.hpp"

namespace xdrec {

using nlohmann::json;

bool is_valid(const Interaction& x) {
  return !x.user_id.empty() && !x.item_id.empty() && x.rating >= 1.0 && x.rating <= 5.0 &&
         x.timestamp >= 0;
}

std::string normalize_title(std::string_view title) {
  std::string out;
  out.reserve(title.size());
  bool pending_space = false;
  for (char c : title) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

namespace {

std::optional<Interaction> parse_review(const std::string& line) {
  json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!j.is_object()) return std::nullopt;
  auto user = j.find("reviewerID");
  auto item = j.find("asin");
  auto overall = j.find("overall");
  auto time = j.find("unixReviewTime");
  if (user == j.end() || item == j.end() || overall == j.end() || time == j.end()) {
    return std::nullopt;
  }
  if (!user->is_string() || !item->is_string() || !overall->is_number() ||
      !(time->is_number_integer() || time->is_number_unsigned())) {
    return std::nullopt;
  }
  Interaction x{user->get<std::string>(), item->get<std::string>(), overall->get<double>(),
                time->get<std::int64_t>()};
  if (!is_valid(x)) return std::nullopt;
  return x;
}

}  // namespace

DomainDataset load_reviews(const std::filesystem::path& path, std::string domain_id) {
  detail::LineReader reader(path);
  DomainDataset ds;
  ds.domain_id = std::move(domain_id);

  std::set<std::tuple<std::string, std::string, std::int64_t>> seen;
  std::string line;
  while (reader.next(line)) {
    ++ds.stats.total_lines;
    auto parsed = parse_review(line);
    if (!parsed) {
      ++ds.stats.skipped_lines;
      continue;
    }
    if (!seen.emplace(parsed->user_id, parsed->item_id, parsed->timestamp).second) {
      ++ds.stats.duplicate_timestamps;
    }
    ds.interactions.push_back(std::move(*parsed));
  }
  if (ds.interactions.empty()) {
    throw FormatError(fmt::format("{}: no valid review lines ({} lines read)", path.string(),
                                  ds.stats.total_lines));
  }
  if (ds.stats.skipped_lines > 0) {
    spdlog::warn("{}: skipped {} malformed lines of {}", path.string(), ds.stats.skipped_lines,
                 ds.stats.total_lines);
  }
  return ds;
}

DomainDataset load_metadata(const std::filesystem::path& path, DomainDataset dataset) {
  std::unordered_set<std::string> referenced;
  for (const auto& x : dataset.interactions) referenced.insert(x.item_id);

  detail::LineReader reader(path);
  std::unordered_map<std::string, std::string> titles;
  std::string line;
  while (reader.next(line)) {
    json j = json::parse(line, nullptr, false);
    if (!j.is_object()) continue;
    auto asin = j.find("asin");
    auto title = j.find("title");
    if (asin == j.end() || title == j.end() || !asin->is_string() || !title->is_string()) {
      continue;
    }
    auto id = asin->get<std::string>();
    if (!referenced.contains(id)) continue;
    auto normalized = normalize_title(title->get_ref<const std::string&>());
    auto [it, inserted] = titles.try_emplace(id, normalized);
    if (!inserted) {
      ++dataset.stats.duplicate_metadata;
      it->second = std::move(normalized);
    }
  }

  dataset.catalog.clear();
  for (auto& [id, title] : titles) {
    if (!title.empty()) dataset.catalog.emplace(id, std::move(title));
  }
  const auto before = dataset.interactions.size();
  std::erase_if(dataset.interactions,
                [&](const Interaction& x) { return !dataset.catalog.contains(x.item_id); });
  dataset.stats.dropped_untitled += before - dataset.interactions.size();
  return dataset;
}

void write_amazon_jsonl(const DomainDataset& dataset, const std::filesystem::path& reviews_path,
                        const std::filesystem::path& metadata_path) {
  std::ofstream reviews(reviews_path, std::ios::binary);
  std::ofstream meta(metadata_path, std::ios::binary);
  if (!reviews) throw IoError("cannot write " + reviews_path.string());
  if (!meta) throw IoError("cannot write " + metadata_path.string());
  for (const auto& x : dataset.interactions) {
    json j = {{"reviewerID", x.user_id},
              {"asin", x.item_id},
              {"overall", x.rating},
              {"unixReviewTime", x.timestamp}};
    reviews << j.dump() << '\n';
  }
  for (const auto& [id, title] : dataset.catalog) {
    meta << json{{"asin", id}, {"title", title}}.dump() << '\n';
  }
}

void validate(const SyntheticSpec& spec) {
  if (spec.n_users < 1 || spec.n_items_per_domain < 1 || spec.n_domains < 1) {
    throw ConfigError("synthetic spec: n_users, n_items_per_domain and n_domains must be >= 1");
  }
  if (spec.preference_dim < 1) throw ConfigError("synthetic spec: preference_dim must be >= 1");
  if (spec.purchases_per_domain < 1) {
    throw ConfigError("synthetic spec: purchases_per_domain must be >= 1");
  }
  if (!(spec.rating_noise >= 0.0)) throw ConfigError("synthetic spec: rating_noise must be >= 0");
}

namespace {

constexpr std::array kAdjectives = {"Crimson", "Silent",  "Electric", "Golden", "Hidden",
                                    "Broken",  "Midnight", "Velvet",  "Frozen", "Wild",
                                    "Lost",    "Brave",   "Distant",  "Hollow", "Iron"};
constexpr std::array kNouns = {"Harbor", "Echo",   "Frontier", "Garden", "Signal",
                               "Empire", "River",  "Machine",  "Legend", "Orchard",
                               "Voyage", "Circus", "Lantern",  "Canyon", "Parade"};

std::string synthetic_title(std::int64_t domain, std::int64_t item) {
  auto a = static_cast<std::size_t>(item) % kAdjectives.size();
  auto n = static_cast<std::size_t>(item / static_cast<std::int64_t>(kAdjectives.size())) %
           kNouns.size();
  return fmt::format("The {} {} Vol. {}-{}", kAdjectives[a], kNouns[n], domain + 1, item + 1);
}

double rating_from_affinity(double affinity) {
  if (affinity > 0.0) return 5.0;
  if (affinity > -0.5) return 4.0;
  if (affinity > -1.0) return 3.0;
  if (affinity > -1.5) return 2.0;
  return 1.0;
}

}  // namespace

std::vector<DomainDataset> generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  const Rng master(spec.rng_seed);
  const auto dim = static_cast<std::size_t>(spec.preference_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));

  std::vector<std::vector<double>> prefs(static_cast<std::size_t>(spec.n_users));
  {
    Rng rng = master.split("users");
    for (auto& p : prefs) {
      p.resize(dim);
      for (auto& v : p) v = rng.normal();
    }
  }

  std::vector<DomainDataset> out(static_cast<std::size_t>(spec.n_domains));
  std::vector<std::vector<std::vector<double>>> item_vecs(out.size());
  for (std::size_t d = 0; d < out.size(); ++d) {
    out[d].domain_id = fmt::format("synthetic-{}", d);
    out[d].group_id = "synthetic";
    Rng rng = master.split(fmt::format("domain:{}", d));
    item_vecs[d].resize(static_cast<std::size_t>(spec.n_items_per_domain));
    for (std::size_t i = 0; i < item_vecs[d].size(); ++i) {
      item_vecs[d][i].resize(dim);
      for (auto& v : item_vecs[d][i]) v = rng.normal();
      out[d].catalog.emplace(fmt::format("d{}-i{:06}", d, i),
                             synthetic_title(static_cast<std::int64_t>(d),
                                             static_cast<std::int64_t>(i)));
    }
  }

  const auto per_domain = static_cast<std::size_t>(
      std::min(spec.purchases_per_domain, spec.n_items_per_domain));
  std::vector<std::size_t> pool(static_cast<std::size_t>(spec.n_items_per_domain));
  for (std::size_t u = 0; u < prefs.size(); ++u) {
    const std::string user_id = fmt::format("u{:06}", u);
    Rng rng = master.split(user_id);
    struct Event {
      std::size_t domain;
      std::size_t item;
    };
    std::vector<Event> events;
    events.reserve(per_domain * out.size());
    for (std::size_t d = 0; d < out.size(); ++d) {
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      for (std::size_t k = 0; k < per_domain; ++k) {
        auto j = k + static_cast<std::size_t>(rng.uniform(pool.size() - k));
        std::swap(pool[k], pool[j]);
        events.push_back({d, pool[k]});
      }
    }
    rng.shuffle(std::span(events));

    std::int64_t t = 1'000'000'000 + static_cast<std::int64_t>(rng.uniform(86'400));
    for (const auto& e : events) {
      t += 3'600 + static_cast<std::int64_t>(rng.uniform(86'400));
      const auto& iv = item_vecs[e.domain][e.item];
      double affinity = std::inner_product(prefs[u].begin(), prefs[u].end(), iv.begin(), 0.0);
      affinity = affinity * scale + spec.rating_noise * rng.normal();
      out[e.domain].interactions.push_back({user_id, fmt::format("d{}-i{:06}", e.domain, e.item),
                                            rating_from_affinity(affinity), t});
    }
  }
  for (auto& ds : out) ds.stats.total_lines = ds.interactions.size();
  return out;
}

std::string dataset_digest(const DomainDataset& dataset) {
  std::string buf;
  buf += dataset.domain_id;
  buf += '\n';
  for (const auto& x : dataset.interactions) {
    buf += fmt::format("{}\t{}\t{:.17g}\t{}\n", x.user_id, x.item_id, x.rating, x.timestamp);
  }
  for (const auto& [id, title] : dataset.catalog) buf += fmt::format("{}\t{}\n", id, title);
  return sha256_hex(buf);
}

double average_user_length(const DomainDataset& dataset) {
  std::unordered_set<std::string_view> users;
  for (const auto& x : dataset.interactions) users.insert(x.user_id);
  if (users.empty()) return 0.0;
  return static_cast<double>(dataset.interactions.size()) / static_cast<double>(users.size());
}

}  // namespace xdrec
