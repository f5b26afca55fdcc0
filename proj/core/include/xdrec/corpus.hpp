#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace xdrec {

// One purchase/review event inside a single domain.
struct Interaction {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Returns true when the interaction satisfies the field invariants
// (rating in [1,5], timestamp >= 0, nonempty ids).
bool is_valid(const Interaction& interaction);

struct LoadStats {
  std::size_t total_lines = 0;
  std::size_t skipped_lines = 0;
  std::size_t dropped_untitled = 0;     // interactions whose item had no title
  std::size_t duplicate_metadata = 0;   // repeated asin lines in metadata
  std::size_t duplicate_timestamps = 0; // same (user, item, timestamp) seen again

  friend bool operator==(const LoadStats&, const LoadStats&) = default;
};

// item_id -> normalized title. Ordered so iteration is deterministic.
using Catalog = std::map<std::string, std::string>;

struct DomainDataset {
  std::string domain_id;
  std::string group_id;
  std::vector<Interaction> interactions;
  Catalog catalog;
  LoadStats stats;

  friend bool operator==(const DomainDataset&, const DomainDataset&) = default;
};

// Trim and collapse internal whitespace runs to a single space.
std::string normalize_title(std::string_view title);

// Reads Amazon review JSON-lines (reviewerID, asin, overall, unixReviewTime).
// Gzip input is decoded transparently. Malformed lines are counted and
// skipped. Throws IoError if unreadable, FormatError if no line is valid.
DomainDataset load_reviews(const std::filesystem::path& path, std::string domain_id);

// Reads metadata JSON-lines (asin, title), fills the catalog and drops
// interactions whose item has no usable title. Last title wins on duplicates.
DomainDataset load_metadata(const std::filesystem::path& path, DomainDataset dataset);

// Writes the dataset back out in the raw review/metadata formats, so
// synthetic corpora can flow through the same ingestion path.
void write_amazon_jsonl(const DomainDataset& dataset, const std::filesystem::path& reviews_path,
                        const std::filesystem::path& metadata_path);

struct SyntheticSpec {
  std::int64_t n_users = 200;
  std::int64_t n_items_per_domain = 300;
  std::int64_t n_domains = 2;
  std::int64_t preference_dim = 8;
  double rating_noise = 0.3;
  std::uint64_t rng_seed = 1;
  // Purchases each user makes in every domain.
  std::int64_t purchases_per_domain = 60;
};

void validate(const SyntheticSpec& spec);

// Deterministic for a fixed seed. Users share one latent preference vector
// across domains; ratings are 5.0 when affinity clears the threshold.
std::vector<DomainDataset> generate_synthetic(const SyntheticSpec& spec);

// Stable digest over domain id, interactions and catalog.
std::string dataset_digest(const DomainDataset& dataset);

// Average number of interactions per distinct user.
double average_user_length(const DomainDataset& dataset);

}  // namespace xdrec
