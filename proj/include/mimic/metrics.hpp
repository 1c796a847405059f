#pragma once

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mimic/common.hpp"

namespace mimic {

/// ACC/ASR record for one evaluated encoder stage.
struct MetricsRecord {
  std::string stage_tag;
  double acc = 0;   // percentage
  double asr = 0;   // percentage
  int target_class = 0;
  uint64_t probe_seed = 0;
  int n_eval = 0;

  nlohmann::json to_json() const {
    return {{"kind", "metrics"}, {"stage_tag", stage_tag}, {"acc", acc},     {"asr", asr},
            {"target_class", target_class}, {"probe_seed", probe_seed}, {"n_eval", n_eval}};
  }
};

/// Append-only JSON-lines stream; every line is flushed so a crash never
/// leaves a partial record ahead of a complete one.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path) { open(path); }

  void open(const std::filesystem::path& path) {
    out_.open(path, std::ios::app);
    if (!out_) throw IngestionError("cannot open metrics stream " + path.string());
  }

  bool is_open() const { return out_.is_open(); }

  void write(const nlohmann::json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot read metrics stream " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_discarded()) out.push_back(std::move(j));
  }
  return out;
}

}  // namespace mimic
