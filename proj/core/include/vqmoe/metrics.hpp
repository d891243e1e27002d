#pragma once

#include "vqmoe/train.hpp"

#include <string>
#include <vector>

namespace vqmoe {

inline constexpr int kMetricsSchemaVersion = 1;

// JSONL metrics stream: line 1 stamps the schema, every following line is one
// flat record. The whole file is rewritten atomically on each append, so a
// reader never sees a torn line and two equal runs produce equal bytes.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string path);

  void log(const StepMetrics& m);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::string buffer_;
};

// Parses a metrics file back; rejects missing schema stamps, version skew,
// and records with a wrong field set.
std::vector<StepMetrics> read_metrics_jsonl(const std::string& path);

}  // namespace vqmoe
