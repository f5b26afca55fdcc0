#include "fixtures.hpp"

#include <fmt/format.h>

#include <atomic>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

namespace xdrec::testing {

namespace fs = std::filesystem;

TempDir::TempDir(std::string_view tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          fmt::format("xdrec-{}-{}-{}", tag, static_cast<long>(::getpid()), counter++);
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

void write_file(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << contents;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Interaction ix(std::string user, std::string item, double rating, std::int64_t ts) {
  return Interaction{std::move(user), std::move(item), rating, ts};
}

DomainDataset make_dataset(std::string domain, std::vector<Interaction> interactions) {
  DomainDataset ds;
  ds.domain_id = std::move(domain);
  for (const auto& x : interactions) ds.catalog.emplace(x.item_id, "Title " + x.item_id);
  ds.interactions = std::move(interactions);
  return ds;
}

UserRecord make_user(std::string user_id, int n_source, int n_target) {
  UserRecord u;
  u.user_id = std::move(user_id);
  for (int i = 0; i < n_source; ++i) {
    u.source.push_back(ix(u.user_id, fmt::format("s{:03}", i), 5.0, i + 1));
  }
  for (int i = 0; i < n_target; ++i) {
    u.target.push_back(ix(u.user_id, fmt::format("t{:03}", i), 5.0, n_source + i + 1));
  }
  return u;
}

CrossDomainCohort small_cohort(std::uint64_t seed, int history_threshold) {
  SyntheticSpec spec;
  spec.n_users = 60;
  spec.n_items_per_domain = 120;
  spec.purchases_per_domain = 70;
  spec.rng_seed = seed;
  auto domains = generate_synthetic(spec);
  FilterConfig fc;
  fc.history_len_threshold = history_threshold;
  return run_filter_pipeline(domains[0], domains[1], fc).cohort;
}

}  // namespace xdrec::testing
