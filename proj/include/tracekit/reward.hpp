#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tracekit/attention.hpp"
#include "tracekit/config.hpp"
#include "tracekit/trace.hpp"
#include "tracekit/uncertainty.hpp"

namespace tracekit::reward {

// Lowercase, trim, collapse whitespace runs, strip punctuation while
// keeping '.' between digits and '-' heading a number; maps whole-answer
// aliases (true->yes, false->no).
std::string normalize_answer(std::string_view text);

// First maximal substring matching -?digits[.digits], parsed as decimal.
std::optional<double> extract_number(std::string_view text);

enum class MatchMode { kNumeric, kText, kAlias };

const char* to_string(MatchMode mode);

struct MatchResult {
  double score = 0.0;  // in [0,1]; numeric mode is {0,1}
  MatchMode mode = MatchMode::kText;
  std::optional<double> answer_number;
  std::optional<double> truth_number;
  std::string answer_norm;
  std::string truth_norm;
};

// Numeric route when both sides contain a number: exact-within-tolerance
// (absolute eps_abs, or relative eps_rel anchored on the ground truth).
// Text route otherwise: F1 over deduplicated whitespace token sets of the
// normalized strings; empty-vs-empty scores 1, empty-vs-nonempty 0.
MatchResult match_answer(std::string_view answer, std::string_view ground_truth,
                         const RewardConfig& cfg);

// Piecewise local reward at one step: 0.40 when pivot and share >= tau_high,
// 0.20 when pivot and tau_mid <= share < tau_high, else 0.
double r_local_step(double mid_share_t, bool is_pivot, const RewardConfig& cfg);

struct StepReward {
  int64_t step = 0;
  double value = 0.0;
};

// Mean of r_local_step over pivot positions; 0 when there are none.
double reward_local(const attention::AttentionProfile& profile,
                    const uncertainty::PivotMask& mask, const RewardConfig& cfg);

// w_global * max(0, global_share - mu_target).
double reward_global(const attention::AttentionProfile& profile, const RewardConfig& cfg);

// Reflection format reward in {0, 0.4}: requires a forced-reflection
// trigger, 1..3 normalized marker occurrences (at/after the trigger
// position when recorded), and mid-layer reengagement >= tau_mid averaged
// over the K-step window from the first marker (clipped to T).
double reward_reflect(const GenerationTrace& trace,
                      const attention::AttentionProfile& profile,
                      const RewardConfig& cfg);

struct RewardBreakdown {
  double r_outcome = 0.0;
  double r_local = 0.0;
  double r_global = 0.0;
  double r_reflect = 0.0;
  double r_total = 0.0;  // r_outcome + (r_local + r_global) + r_reflect
  std::vector<StepReward> local_steps;  // r_local components at pivots
  int64_t n_pivot = 0;
  MatchResult match;
};

RewardBreakdown reward_total(const GenerationTrace& trace,
                             const attention::AttentionProfile& profile,
                             const uncertainty::PivotMask& mask,
                             std::string_view ground_truth, const RewardConfig& cfg);

}  // namespace tracekit::reward
