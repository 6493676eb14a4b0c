#include "tracekit/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include <nlohmann/json.hpp>

#include "fsio.hpp"
#include "tracekit/errors.hpp"

namespace tracekit::report {

std::string fmt_double(double v) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  fsio::write_atomic(path, content);
}

CsvBuilder::CsvBuilder(std::vector<std::string> header) : columns_(header.size()) {
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) out_ += ',';
    out_ += header[i];
  }
  out_ += '\n';
}

CsvBuilder& CsvBuilder::cell(std::string_view s) {
  if (in_row_) out_ += ',';
  const bool needs_quotes = s.find_first_of(",\"\n") != std::string_view::npos;
  if (needs_quotes) {
    out_ += '"';
    for (char c : s) {
      if (c == '"') out_ += '"';
      out_ += c;
    }
    out_ += '"';
  } else {
    out_ += s;
  }
  ++in_row_;
  return *this;
}

CsvBuilder& CsvBuilder::cell(double v) { return cell(std::string_view(fmt_double(v))); }

CsvBuilder& CsvBuilder::cell(int64_t v) {
  return cell(std::string_view(std::to_string(v)));
}

CsvBuilder& CsvBuilder::end_row() {
  if (in_row_ != columns_)
    throw internal_error("csv row holds " + std::to_string(in_row_) + " cells, header has " +
                         std::to_string(columns_));
  out_ += '\n';
  in_row_ = 0;
  return *this;
}

std::string landscape_csv(const std::vector<double>& landscape,
                          const uncertainty::PivotMask& mask) {
  CsvBuilder csv({"step", "entropy", "is_pivot"});
  for (size_t t = 0; t < landscape.size(); ++t) {
    csv.cell(static_cast<int64_t>(t))
        .cell(landscape[t])
        .cell(static_cast<int64_t>(mask.mask[t] ? 1 : 0))
        .end_row();
  }
  return csv.str();
}

std::string profile_csv(const attention::AttentionProfile& profile) {
  CsvBuilder csv({"step", "layer", "share", "valid", "concentration"});
  for (int64_t t = 0; t < profile.steps; ++t) {
    for (int layer = 1; layer <= profile.layers; ++layer) {
      csv.cell(t)
          .cell(static_cast<int64_t>(layer))
          .cell(profile.share_at(t, layer))
          .cell(static_cast<int64_t>(profile.valid_at(t, layer) ? 1 : 0))
          .cell(profile.concentration_at(t, layer))
          .end_row();
    }
  }
  return csv.str();
}

std::string mid_share_csv(const attention::AttentionProfile& profile) {
  CsvBuilder csv({"step", "mid_share"});
  for (int64_t t = 0; t < profile.steps; ++t)
    csv.cell(t).cell(profile.mid_share[static_cast<size_t>(t)]).end_row();
  return csv.str();
}

std::string u_score_csv(const attention::UScore& score) {
  CsvBuilder csv({"delta_drop", "delta_rec", "u_score_percent", "baseline_begin",
                  "baseline_end", "trough_begin", "trough_end", "recovery_begin",
                  "recovery_end"});
  csv.cell(score.delta_drop)
      .cell(score.delta_rec)
      .cell(score.u_score_percent)
      .cell(score.baseline_window.begin)
      .cell(score.baseline_window.end)
      .cell(score.trough_window.begin)
      .cell(score.trough_window.end)
      .cell(score.recovery_window.begin)
      .cell(score.recovery_window.end)
      .end_row();
  return csv.str();
}

std::string divergence_csv(const probe::LayerDivergence& divergence) {
  CsvBuilder csv({"layer", "dm_a", "dm_b", "gap"});
  for (const auto& row : divergence.rows)
    csv.cell(static_cast<int64_t>(row.layer))
        .cell(row.dm_a)
        .cell(row.dm_b)
        .cell(row.gap)
        .end_row();
  std::string out = csv.str();
  out += "# onset_layer=";
  out += divergence.onset_layer ? std::to_string(*divergence.onset_layer) : "none";
  out += " margin=" + fmt_double(divergence.margin) + "\n";
  return out;
}

std::string training_series_csv(const toy::TrainingReport& report) {
  CsvBuilder csv({"iteration", "mean_r_total", "mean_r_outcome", "mean_r_local",
                  "mean_r_global", "mean_r_reflect", "pivot_window_mid_share", "accuracy",
                  "loss_grpo", "loss_sft", "replay_size"});
  for (size_t i = 0; i < report.iterations.size(); ++i) {
    const auto& s = report.iterations[i];
    csv.cell(static_cast<int64_t>(i))
        .cell(s.mean_r_total)
        .cell(s.mean_r_outcome)
        .cell(s.mean_r_local)
        .cell(s.mean_r_global)
        .cell(s.mean_r_reflect)
        .cell(s.pivot_window_mid_share)
        .cell(s.accuracy)
        .cell(s.loss_grpo)
        .cell(s.loss_sft)
        .cell(s.replay_size)
        .end_row();
  }
  return csv.str();
}

nlohmann::json landscape_json(const std::vector<double>& landscape,
                              const uncertainty::PivotMask& mask) {
  auto rows = nlohmann::json::array();
  for (size_t t = 0; t < landscape.size(); ++t)
    rows.push_back({{"step", t},
                    {"entropy", landscape[t]},
                    {"is_pivot", mask.mask[t] ? 1 : 0}});
  return rows;
}

nlohmann::json profile_json(const attention::AttentionProfile& profile) {
  auto rows = nlohmann::json::array();
  for (int64_t t = 0; t < profile.steps; ++t)
    for (int layer = 1; layer <= profile.layers; ++layer)
      rows.push_back({{"step", t},
                      {"layer", layer},
                      {"share", profile.share_at(t, layer)},
                      {"valid", profile.valid_at(t, layer) ? 1 : 0},
                      {"concentration", profile.concentration_at(t, layer)}});
  return nlohmann::json{{"cells", rows},
                        {"mid_share", profile.mid_share},
                        {"global_share", profile.global_share},
                        {"mid_layers", profile.mid_layers},
                        {"all_layers", profile.all_layers}};
}

nlohmann::json u_score_json(const attention::UScore& score) {
  return nlohmann::json{
      {"delta_drop", score.delta_drop},
      {"delta_rec", score.delta_rec},
      {"u_score_percent", score.u_score_percent},
      {"baseline_window", {score.baseline_window.begin, score.baseline_window.end}},
      {"trough_window", {score.trough_window.begin, score.trough_window.end}},
      {"recovery_window", {score.recovery_window.begin, score.recovery_window.end}}};
}

nlohmann::json breakdown_json(const reward::RewardBreakdown& breakdown) {
  auto steps = nlohmann::json::array();
  for (const auto& s : breakdown.local_steps)
    steps.push_back({{"step", s.step}, {"value", s.value}});
  return nlohmann::json{{"r_outcome", breakdown.r_outcome},
                        {"r_local", breakdown.r_local},
                        {"r_global", breakdown.r_global},
                        {"r_reflect", breakdown.r_reflect},
                        {"r_total", breakdown.r_total},
                        {"n_pivot", breakdown.n_pivot},
                        {"local_steps", steps},
                        {"match_mode", reward::to_string(breakdown.match.mode)},
                        {"answer_norm", breakdown.match.answer_norm},
                        {"truth_norm", breakdown.match.truth_norm}};
}

nlohmann::json training_report_json(const toy::TrainingReport& report) {
  auto iters = nlohmann::json::array();
  for (size_t i = 0; i < report.iterations.size(); ++i) {
    const auto& s = report.iterations[i];
    iters.push_back({{"iteration", i},
                     {"mean_r_total", s.mean_r_total},
                     {"mean_r_outcome", s.mean_r_outcome},
                     {"mean_r_local", s.mean_r_local},
                     {"mean_r_global", s.mean_r_global},
                     {"mean_r_reflect", s.mean_r_reflect},
                     {"pivot_window_mid_share", s.pivot_window_mid_share},
                     {"accuracy", s.accuracy},
                     {"loss_grpo", s.loss_grpo},
                     {"loss_sft", s.loss_sft},
                     {"replay_size", s.replay_size}});
  }
  return nlohmann::json{{"seed", report.seed},
                        {"iterations", iters},
                        {"final_accuracy", report.final_accuracy},
                        {"final_pivot_window_mid_share", report.final_pivot_window_mid_share},
                        {"final_mean_u_score", report.final_mean_u_score},
                        {"config", nlohmann::json::parse(report.config_snapshot)}};
}

std::string svg_line_plot(const std::vector<Series>& series, std::string_view title,
                          int width, int height) {
  const double margin = 48.0;
  const double plot_w = width - 2 * margin;
  const double plot_h = height - 2 * margin;

  double min_x = 0.0, max_x = 1.0, min_y = 0.0, max_y = 1.0;
  bool first = true;
  for (const auto& s : series) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        min_x = max_x = s.x[i];
        min_y = max_y = s.y[i];
        first = false;
      }
      min_x = std::min(min_x, s.x[i]);
      max_x = std::max(max_x, s.x[i]);
      min_y = std::min(min_y, s.y[i]);
      max_y = std::max(max_y, s.y[i]);
    }
  }
  if (max_x == min_x) max_x = min_x + 1.0;
  if (max_y == min_y) max_y = min_y + 1.0;

  auto px = [&](double x) { return margin + (x - min_x) / (max_x - min_x) * plot_w; };
  auto py = [&](double y) { return height - margin - (y - min_y) / (max_y - min_y) * plot_h; };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + fmt_double(width / 2.0) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         std::string(title) + "</text>\n";
  // axes
  out += "<line x1=\"" + fmt_double(margin) + "\" y1=\"" + fmt_double(height - margin) +
         "\" x2=\"" + fmt_double(width - margin) + "\" y2=\"" +
         fmt_double(height - margin) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + fmt_double(margin) + "\" y1=\"" + fmt_double(margin) + "\" x2=\"" +
         fmt_double(margin) + "\" y2=\"" + fmt_double(height - margin) +
         "\" stroke=\"black\"/>\n";
  out += "<text x=\"" + fmt_double(margin) + "\" y=\"" + fmt_double(height - margin + 16) +
         "\" font-family=\"sans-serif\" font-size=\"10\">" + fmt_double(min_x) + "</text>\n";
  out += "<text x=\"" + fmt_double(width - margin) + "\" y=\"" +
         fmt_double(height - margin + 16) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
         fmt_double(max_x) + "</text>\n";
  out += "<text x=\"" + fmt_double(margin - 4) + "\" y=\"" + fmt_double(height - margin) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
         fmt_double(min_y) + "</text>\n";
  out += "<text x=\"" + fmt_double(margin - 4) + "\" y=\"" + fmt_double(margin) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
         fmt_double(max_y) + "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    if (s.x.empty()) continue;
    std::string points;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (i) points += ' ';
      points += fmt_double(px(s.x[i])) + "," + fmt_double(py(s.y[i]));
    }
    const char* color = kColors[si % (sizeof(kColors) / sizeof(kColors[0]))];
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
    out += "<text x=\"" + fmt_double(width - margin) + "\" y=\"" +
           fmt_double(margin + 14.0 * static_cast<double>(si)) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" +
           color + "\">" + s.label + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace tracekit::report
