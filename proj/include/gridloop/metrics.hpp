#pragma once

#include <fstream>
#include <string>

#include "json.hpp"

namespace gridloop {

using ordered_json = nlohmann::ordered_json;

// JSON-lines sink; one object per line, keys in insertion order so that
// equal runs produce byte-identical files.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path, bool append = false) {
    if (!path.empty()) {
      os_.open(path, append ? std::ios::app : std::ios::out);
      if (!os_) throw std::runtime_error("cannot open metrics file " + path);
    }
  }
  void write(const ordered_json& row) {
    if (os_.is_open()) os_ << row.dump() << "\n";
    rows_.push_back(row);
  }
  void flush() {
    if (os_.is_open()) os_.flush();
  }
  const std::vector<ordered_json>& rows() const { return rows_; }

 private:
  std::ofstream os_;
  std::vector<ordered_json> rows_;
};

}  // namespace gridloop
