#include "line_reader.hpp"

#include <array>

#include "xdrec/errors.hpp"

namespace xdrec::detail {

LineReader::LineReader(const std::filesystem::path& path) : path_(path) {
  // gzopen reads uncompressed files transparently.
  file_ = gzopen(path.c_str(), "rb");
  if (file_ == nullptr) throw IoError("cannot open " + path.string());
}

LineReader::~LineReader() {
  if (file_ != nullptr) gzclose(file_);
}

bool LineReader::next(std::string& line) {
  line.clear();
  std::array<char, 8192> buf{};
  bool any = false;
  while (gzgets(file_, buf.data(), static_cast<int>(buf.size())) != nullptr) {
    any = true;
    line.append(buf.data());
    if (!line.empty() && line.back() == '\n') break;
  }
  if (!any) {
    int err = Z_OK;
    gzerror(file_, &err);
    if (err != Z_OK && err != Z_STREAM_END) throw IoError("read error in " + path_.string());
    return false;
  }
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
  return true;
}

}  // namespace xdrec::detail
