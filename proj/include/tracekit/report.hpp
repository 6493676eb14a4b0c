#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tracekit/attention.hpp"
#include "tracekit/probe.hpp"
#include "tracekit/reward.hpp"
#include "tracekit/toy.hpp"
#include "tracekit/uncertainty.hpp"

namespace tracekit::report {

// Shortest decimal form that round-trips the double exactly.
std::string fmt_double(double v);

// Writes via a temp file in the same directory, then renames.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

class CsvBuilder {
 public:
  explicit CsvBuilder(std::vector<std::string> header);
  CsvBuilder& cell(std::string_view s);
  CsvBuilder& cell(double v);
  CsvBuilder& cell(int64_t v);
  CsvBuilder& end_row();
  const std::string& str() const { return out_; }

 private:
  std::string out_;
  size_t columns_ = 0;
  size_t in_row_ = 0;
};

std::string landscape_csv(const std::vector<double>& landscape,
                          const uncertainty::PivotMask& mask);
std::string profile_csv(const attention::AttentionProfile& profile);
std::string mid_share_csv(const attention::AttentionProfile& profile);
std::string u_score_csv(const attention::UScore& score);
std::string divergence_csv(const probe::LayerDivergence& divergence);
std::string training_series_csv(const toy::TrainingReport& report);

nlohmann::json landscape_json(const std::vector<double>& landscape,
                              const uncertainty::PivotMask& mask);
nlohmann::json profile_json(const attention::AttentionProfile& profile);
nlohmann::json u_score_json(const attention::UScore& score);
nlohmann::json breakdown_json(const reward::RewardBreakdown& breakdown);
nlohmann::json training_report_json(const toy::TrainingReport& report);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Dependency-light SVG line plot; CSV stays the contract, this is a
// convenience view.
std::string svg_line_plot(const std::vector<Series>& series, std::string_view title,
                          int width = 720, int height = 360);

}  // namespace tracekit::report
