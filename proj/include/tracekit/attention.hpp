#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tracekit/config.hpp"
#include "tracekit/trace.hpp"

namespace tracekit::attention {

// Head-averaged attention row over the visual columns at (t, layer).
// layer is 1-based. HEADAVG layouts return the stored row.
std::vector<double> head_avg(const GenerationTrace& trace, int64_t t, int layer);

// Visual attention share: sum of the head-averaged row (equivalently the
// head-mean of per-head row sums).
double visual_share(const GenerationTrace& trace, int64_t t, int layer);

// True iff the effective activation count |{j : head_avg[j] > gamma_attn}|
// strictly exceeds kappa_min. Invalid cells contribute 0 to aggregates but
// stay in denominators.
bool sparsity_valid(const GenerationTrace& trace, int64_t t, int layer,
                    double gamma_attn, int64_t kappa_min);

// Mean of sparsity-masked shares over mid_layers (1-based, nonempty,
// within [1, L]).
double mid_share(const GenerationTrace& trace, int64_t t,
                 const std::vector<int>& mid_layers, double gamma_attn,
                 int64_t kappa_min);

// Grand mean of sparsity-masked shares over all steps and all_layers.
double global_share(const GenerationTrace& trace, const std::vector<int>& all_layers,
                    double gamma_attn, int64_t kappa_min);

// 1 - H(p)/log(V) for the renormalized head-averaged row; 0 when the row
// carries no mass. Scale-invariant, in [0, 1]. Requires V >= 2.
double concentration(const GenerationTrace& trace, int64_t t, int layer);

struct AttentionProfile {
  int64_t steps = 0;
  int64_t layers = 0;
  std::vector<int> mid_layers;            // resolved, 1-based
  std::vector<int> all_layers;            // resolved, 1-based
  std::vector<double> share;              // T x L, raw S_t^(l)
  std::vector<uint8_t> valid;             // T x L sparsity filter outcome
  std::vector<double> concentration;      // T x L
  std::vector<double> mid_share;          // length T, sparsity-masked
  double global_share = 0.0;              // sparsity-masked grand mean

  double share_at(int64_t t, int layer) const { return share[t * layers + (layer - 1)]; }
  bool valid_at(int64_t t, int layer) const { return valid[t * layers + (layer - 1)] != 0; }
  double concentration_at(int64_t t, int layer) const {
    return concentration[t * layers + (layer - 1)];
  }
};

// Evaluates every cell once; kappa_min and layer sets resolved from cfg.
AttentionProfile compute_profile(const GenerationTrace& trace, const RewardConfig& cfg);

struct UScoreWindows {
  int64_t pre = 5;    // steps, window ends at pivot_pos (inclusive)
  int64_t post = 10;  // steps, window starts at reflect_pos (inclusive)
};

struct UScore {
  double delta_drop = 0.0;
  double delta_rec = 0.0;
  double u_score_percent = 0.0;  // 100 * rec / (drop + rec + eps)
  Span baseline_window;
  Span trough_window;  // (pivot_pos, reflect_pos]
  Span recovery_window;
};

// Attention-recovery ratio around a reflection. baseline = mean over the
// pre window, trough = min over (pivot_pos, reflect_pos], recovery = mean
// over the post window. Requires pivot_pos < reflect_pos < T and windows
// inside [0, T); throws input_error otherwise.
UScore u_score(std::span<const double> series, int64_t pivot_pos, int64_t reflect_pos,
               UScoreWindows windows, double eps = 1e-8);

}  // namespace tracekit::attention
