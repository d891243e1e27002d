#include "vqmoe/metrics.hpp"

#include "vqmoe/io.hpp"

#include <stdexcept>
#include <utility>

#include "json.hpp"

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

}  // namespace

MetricsWriter::MetricsWriter(std::string path) : path_(std::move(path)) {
  buffer_ = "{\"schema_version\":" + std::to_string(kMetricsSchemaVersion) + "}\n";
  atomic_write_text(path_, buffer_);
}

void MetricsWriter::log(const StepMetrics& m) {
  buffer_ += "{\"step\":" + std::to_string(m.step) +
             ",\"task_loss\":" + fmt_double(m.task_loss) +
             ",\"vq_loss\":" + fmt_double(m.vq_loss) +
             ",\"total_loss\":" + fmt_double(m.total_loss) +
             ",\"lr\":" + fmt_double(m.lr) +
             ",\"grad_norm\":" + fmt_double(m.grad_norm) + "}\n";
  atomic_write_text(path_, buffer_);
}

std::vector<StepMetrics> read_metrics_jsonl(const std::string& path) {
  const std::string text = read_text_file(path);
  std::vector<StepMetrics> out;
  size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail("read_metrics_jsonl", "line " + std::to_string(line_no) +
                                     " is not valid JSON: " + e.what());
    }
    if (line_no == 1) {
      if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
        fail("read_metrics_jsonl", "line 1 must stamp schema_version");
      if (j["schema_version"].get<int>() != kMetricsSchemaVersion)
        fail("read_metrics_jsonl",
             "schema_version " + j["schema_version"].dump() + ", supported " +
                 std::to_string(kMetricsSchemaVersion));
      continue;
    }
    const char* fields[] = {"step",       "task_loss", "vq_loss",
                            "total_loss", "lr",        "grad_norm"};
    if (j.size() != 6)
      fail("read_metrics_jsonl", "line " + std::to_string(line_no) +
                                     " has " + std::to_string(j.size()) +
                                     " fields, expected 6");
    for (const char* f : fields)
      if (!j.contains(f))
        fail("read_metrics_jsonl", "line " + std::to_string(line_no) +
                                       " is missing '" + f + "'");
    StepMetrics m;
    m.step = j["step"].get<int64_t>();
    m.task_loss = j["task_loss"].get<double>();
    m.vq_loss = j["vq_loss"].get<double>();
    m.total_loss = j["total_loss"].get<double>();
    m.lr = j["lr"].get<double>();
    m.grad_norm = j["grad_norm"].get<double>();
    out.push_back(m);
  }
  if (line_no == 0) fail("read_metrics_jsonl", "'" + path + "' is empty");
  return out;
}

}  // namespace vqmoe
