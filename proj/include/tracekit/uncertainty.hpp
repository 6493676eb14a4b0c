#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tracekit/trace.hpp"

namespace tracekit::uncertainty {

// Shannon entropy in nats. dist must be nonnegative and sum to 1 within
// 1e-6; zero entries contribute zero. Accumulation is double precision.
double shannon_entropy(std::span<const float> dist);
double shannon_entropy(std::span<const double> dist);

// Per-step entropy. Recomputes from step_distributions when present; if a
// stored step_entropy also exists the two must agree within 1e-4 per step
// or an input_error is raised. A trace carrying only step_entropy returns
// that vector verbatim.
std::vector<double> entropy_landscape(const GenerationTrace& trace);

struct PivotMask {
  std::vector<bool> mask;                 // length T
  std::vector<int64_t> pivot_positions;   // sorted ascending
  int64_t n_pivot = 0;
};

// mask[t] = 1 iff landscape[t] > tau_ent (strict).
PivotMask pivot_mask(std::span<const double> landscape, double tau_ent);

// Case-folds and strips leading/trailing non-alphanumeric characters.
std::string normalize_token(std::string_view text);

// Positions whose normalized surface form is in the lexicon, ascending.
std::vector<int64_t> transition_anchors(const std::vector<Token>& tokens,
                                        const std::set<std::string>& lexicon);

}  // namespace tracekit::uncertainty
