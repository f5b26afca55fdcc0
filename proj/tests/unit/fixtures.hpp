#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xdrec/corpus.hpp"
#include "xdrec/filtering.hpp"

namespace xdrec::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(std::string_view tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(std::string_view name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

void write_file(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

Interaction ix(std::string user, std::string item, double rating, std::int64_t ts);

// Catalog entry per referenced item, title "Title <item>".
DomainDataset make_dataset(std::string domain, std::vector<Interaction> interactions);

// A user with `n_source` source purchases at t=1..n_source and `n_target`
// target purchases after that.
UserRecord make_user(std::string user_id, int n_source, int n_target);

// Synthetic cohort built through the real pipeline, small enough for unit tests.
CrossDomainCohort small_cohort(std::uint64_t seed = 11, int history_threshold = 20);

}  // namespace xdrec::testing
