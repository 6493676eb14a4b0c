#include "tracekit/attention.hpp"

#include <algorithm>
#include <cmath>

#include "tracekit/errors.hpp"

namespace tracekit::attention {

namespace {

void check_cell(const GenerationTrace& trace, int64_t t, int layer) {
  if (t < 0 || t >= trace.steps)
    throw input_error("attention: step " + std::to_string(t) + " outside [0, " +
                      std::to_string(trace.steps) + ")");
  if (layer < 1 || layer > trace.layers)
    throw input_error("attention: layer " + std::to_string(layer) + " outside [1, " +
                      std::to_string(trace.layers) + "]");
  if (!trace.has_attention()) throw input_error("attention: trace has no attention tensor");
}

}  // namespace

std::vector<double> head_avg(const GenerationTrace& trace, int64_t t, int layer) {
  check_cell(trace, t, layer);
  std::vector<double> row(static_cast<size_t>(trace.visual_tokens), 0.0);
  if (trace.layout == AttentionLayout::kHeadAvg) {
    for (int64_t j = 0; j < trace.visual_tokens; ++j)
      row[static_cast<size_t>(j)] = static_cast<double>(trace.attn_headavg(t, layer, j));
    return row;
  }
  for (int64_t h = 0; h < trace.heads; ++h)
    for (int64_t j = 0; j < trace.visual_tokens; ++j)
      row[static_cast<size_t>(j)] += static_cast<double>(trace.attn_full(t, layer, h, j));
  const double inv = 1.0 / static_cast<double>(trace.heads);
  for (double& v : row) v *= inv;
  return row;
}

double visual_share(const GenerationTrace& trace, int64_t t, int layer) {
  const auto row = head_avg(trace, t, layer);
  double sum = 0.0;
  for (double v : row) sum += v;
  return sum;
}

bool sparsity_valid(const GenerationTrace& trace, int64_t t, int layer,
                    double gamma_attn, int64_t kappa_min) {
  const auto row = head_avg(trace, t, layer);
  int64_t active = 0;
  for (double v : row)
    if (v > gamma_attn) ++active;
  return active > kappa_min;  // strict: the count must exceed kappa_min
}

double mid_share(const GenerationTrace& trace, int64_t t,
                 const std::vector<int>& mid_layers, double gamma_attn,
                 int64_t kappa_min) {
  if (mid_layers.empty()) throw input_error("mid_share: empty layer set");
  double sum = 0.0;
  for (int layer : mid_layers) {
    if (sparsity_valid(trace, t, layer, gamma_attn, kappa_min))
      sum += visual_share(trace, t, layer);
  }
  return sum / static_cast<double>(mid_layers.size());
}

double global_share(const GenerationTrace& trace, const std::vector<int>& all_layers,
                    double gamma_attn, int64_t kappa_min) {
  if (all_layers.empty()) throw input_error("global_share: empty layer set");
  double sum = 0.0;
  for (int64_t t = 0; t < trace.steps; ++t) {
    for (int layer : all_layers) {
      if (sparsity_valid(trace, t, layer, gamma_attn, kappa_min))
        sum += visual_share(trace, t, layer);
    }
  }
  return sum / (static_cast<double>(trace.steps) * static_cast<double>(all_layers.size()));
}

double concentration(const GenerationTrace& trace, int64_t t, int layer) {
  if (trace.visual_tokens < 2)
    throw input_error("concentration: needs V >= 2 visual tokens");
  auto row = head_avg(trace, t, layer);
  double total = 0.0;
  for (double v : row) total += v;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double v : row) {
    const double p = v / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return 1.0 - h / std::log(static_cast<double>(trace.visual_tokens));
}

AttentionProfile compute_profile(const GenerationTrace& trace, const RewardConfig& cfg) {
  AttentionProfile profile;
  profile.steps = trace.steps;
  profile.layers = trace.layers;
  profile.mid_layers = cfg.effective_mid_layers(trace.layers);
  profile.all_layers = cfg.effective_all_layers(trace.layers);
  const int64_t kappa = cfg.effective_kappa_min(trace.visual_tokens);

  const size_t cells = static_cast<size_t>(trace.steps * trace.layers);
  profile.share.assign(cells, 0.0);
  profile.valid.assign(cells, 0);
  profile.concentration.assign(cells, 0.0);
  profile.mid_share.assign(static_cast<size_t>(trace.steps), 0.0);

  for (int64_t t = 0; t < trace.steps; ++t) {
    for (int layer = 1; layer <= trace.layers; ++layer) {
      const auto row = head_avg(trace, t, layer);
      double share = 0.0;
      int64_t active = 0;
      for (double v : row) {
        share += v;
        if (v > cfg.gamma_attn) ++active;
      }
      const size_t cell = static_cast<size_t>(t * trace.layers + (layer - 1));
      profile.share[cell] = share;
      profile.valid[cell] = active > kappa ? 1 : 0;

      if (trace.visual_tokens >= 2 && share > 0.0) {
        double h = 0.0;
        for (double v : row) {
          const double p = v / share;
          if (p > 0.0) h -= p * std::log(p);
        }
        profile.concentration[cell] =
            1.0 - h / std::log(static_cast<double>(trace.visual_tokens));
      }
    }
  }

  for (int64_t t = 0; t < trace.steps; ++t) {
    double sum = 0.0;
    for (int layer : profile.mid_layers) {
      const size_t cell = static_cast<size_t>(t * trace.layers + (layer - 1));
      if (profile.valid[cell]) sum += profile.share[cell];
    }
    profile.mid_share[static_cast<size_t>(t)] =
        sum / static_cast<double>(profile.mid_layers.size());
  }

  double grand = 0.0;
  for (int64_t t = 0; t < trace.steps; ++t) {
    for (int layer : profile.all_layers) {
      const size_t cell = static_cast<size_t>(t * trace.layers + (layer - 1));
      if (profile.valid[cell]) grand += profile.share[cell];
    }
  }
  profile.global_share = grand / (static_cast<double>(trace.steps) *
                                  static_cast<double>(profile.all_layers.size()));
  return profile;
}

UScore u_score(std::span<const double> series, int64_t pivot_pos, int64_t reflect_pos,
               UScoreWindows windows, double eps) {
  const int64_t n = static_cast<int64_t>(series.size());
  if (!(pivot_pos < reflect_pos && reflect_pos < n))
    throw input_error("u_score: requires pivot_pos < reflect_pos < T");
  if (windows.pre < 1 || windows.post < 1)
    throw input_error("u_score: windows must span at least one step");
  const int64_t base_begin = pivot_pos - windows.pre + 1;
  const int64_t rec_end = reflect_pos + windows.post;
  if (base_begin < 0)
    throw input_error("u_score: pre window extends before step 0");
  if (rec_end > n)
    throw input_error("u_score: post window extends past the series end");

  UScore out;
  out.baseline_window = {base_begin, pivot_pos + 1};
  out.trough_window = {pivot_pos + 1, reflect_pos + 1};
  out.recovery_window = {reflect_pos, rec_end};

  double baseline = 0.0;
  for (int64_t i = base_begin; i <= pivot_pos; ++i) baseline += series[static_cast<size_t>(i)];
  baseline /= static_cast<double>(windows.pre);

  double trough = series[static_cast<size_t>(pivot_pos + 1)];
  for (int64_t i = pivot_pos + 1; i <= reflect_pos; ++i)
    trough = std::min(trough, series[static_cast<size_t>(i)]);

  double recovery = 0.0;
  for (int64_t i = reflect_pos; i < rec_end; ++i) recovery += series[static_cast<size_t>(i)];
  recovery /= static_cast<double>(windows.post);

  out.delta_drop = std::max(0.0, baseline - trough);
  out.delta_rec = std::max(0.0, recovery - trough);
  out.u_score_percent = 100.0 * out.delta_rec / (out.delta_drop + out.delta_rec + eps);
  return out;
}

}  // namespace tracekit::attention
