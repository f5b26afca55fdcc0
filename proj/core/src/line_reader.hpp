#pragma once

#include <zlib.h>

#include <filesystem>
#include <string>

namespace xdrec::detail {

// Line-at-a-time reader over plain or gzip-compressed files.
class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path);
  ~LineReader();
  LineReader(const LineReader&) = delete;
  LineReader& operator=(const LineReader&) = delete;

  // False at end of file. The trailing newline (and CR) is removed.
  bool next(std::string& line);

 private:
  gzFile file_ = nullptr;
  std::filesystem::path path_;
};

}  // namespace xdrec::detail
