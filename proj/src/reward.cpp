#include "tracekit/reward.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>

#include "tracekit/errors.hpp"

namespace tracekit::reward {

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Normalization minus the alias step; reports whether an alias fired.
std::string normalize_impl(std::string_view text, bool* aliased) {
  std::string kept;
  kept.reserve(text.size());
  const size_t n = text.size();
  for (size_t i = 0; i < n; ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c)) {
      kept.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      kept.push_back(' ');
    } else if (text[i] == '.') {
      // decimal point: only between digits
      if (i > 0 && is_digit(text[i - 1]) && i + 1 < n && is_digit(text[i + 1]))
        kept.push_back('.');
    } else if (text[i] == '-') {
      // negative sign: only heading a number
      const bool digit_next = i + 1 < n && is_digit(text[i + 1]);
      const bool decimal_next =
          i + 2 < n && text[i + 1] == '.' && is_digit(text[i + 2]);
      if (digit_next || decimal_next) kept.push_back('-');
    }
    // other punctuation dropped
  }

  std::string out;
  out.reserve(kept.size());
  bool pending_space = false;
  for (char c : kept) {
    if (c == ' ') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(c);
  }

  if (aliased) *aliased = false;
  if (out == "true") {
    out = "yes";
    if (aliased) *aliased = true;
  } else if (out == "false") {
    out = "no";
    if (aliased) *aliased = true;
  }
  return out;
}

std::set<std::string> token_set(const std::string& normalized) {
  std::set<std::string> out;
  std::istringstream is(normalized);
  std::string w;
  while (is >> w) out.insert(w);
  return out;
}

double set_f1(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  size_t common = 0;
  for (const auto& w : a)
    if (b.count(w)) ++common;
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(a.size());
  const double recall = static_cast<double>(common) / static_cast<double>(b.size());
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

const char* to_string(MatchMode mode) {
  switch (mode) {
    case MatchMode::kNumeric: return "numeric";
    case MatchMode::kText: return "text";
    case MatchMode::kAlias: return "alias";
  }
  return "?";
}

std::string normalize_answer(std::string_view text) {
  return normalize_impl(text, nullptr);
}

std::optional<double> extract_number(std::string_view text) {
  const size_t n = text.size();
  for (size_t i = 0; i < n; ++i) {
    size_t start = i;
    if (text[i] == '-') {
      if (i + 1 >= n || !is_digit(text[i + 1])) continue;
    } else if (!is_digit(text[i])) {
      continue;
    }
    size_t j = start;
    if (text[j] == '-') ++j;
    while (j < n && is_digit(text[j])) ++j;
    if (j + 1 < n && text[j] == '.' && is_digit(text[j + 1])) {
      ++j;
      while (j < n && is_digit(text[j])) ++j;
    }
    const std::string token(text.substr(start, j - start));
    return std::strtod(token.c_str(), nullptr);
  }
  return std::nullopt;
}

MatchResult match_answer(std::string_view answer, std::string_view ground_truth,
                         const RewardConfig& cfg) {
  MatchResult result;
  bool ans_aliased = false;
  bool truth_aliased = false;
  result.answer_norm = normalize_impl(answer, &ans_aliased);
  result.truth_norm = normalize_impl(ground_truth, &truth_aliased);
  result.answer_number = extract_number(result.answer_norm);
  result.truth_number = extract_number(result.truth_norm);

  if (result.answer_number && result.truth_number) {
    result.mode = MatchMode::kNumeric;
    const double delta = std::fabs(*result.answer_number - *result.truth_number);
    const bool abs_ok = delta <= cfg.eps_abs;
    const bool rel_ok =
        delta / (std::fabs(*result.truth_number) + cfg.eps_0) <= cfg.eps_rel;
    result.score = (abs_ok || rel_ok) ? 1.0 : 0.0;
    return result;
  }

  result.mode = (ans_aliased || truth_aliased) ? MatchMode::kAlias : MatchMode::kText;
  result.score = set_f1(token_set(result.answer_norm), token_set(result.truth_norm));
  return result;
}

double r_local_step(double mid_share_t, bool is_pivot, const RewardConfig& cfg) {
  if (!is_pivot) return 0.0;
  if (mid_share_t >= cfg.tau_high) return 0.40;
  if (mid_share_t >= cfg.tau_mid) return 0.20;
  return 0.0;
}

double reward_local(const attention::AttentionProfile& profile,
                    const uncertainty::PivotMask& mask, const RewardConfig& cfg) {
  if (profile.mid_share.size() != mask.mask.size())
    throw input_error("reward_local: profile spans " +
                      std::to_string(profile.mid_share.size()) + " steps, mask " +
                      std::to_string(mask.mask.size()));
  if (mask.n_pivot == 0) return 0.0;
  double sum = 0.0;
  for (int64_t p : mask.pivot_positions)
    sum += r_local_step(profile.mid_share[static_cast<size_t>(p)], true, cfg);
  return sum / static_cast<double>(mask.n_pivot);
}

double reward_global(const attention::AttentionProfile& profile, const RewardConfig& cfg) {
  return cfg.w_global * std::max(0.0, profile.global_share - cfg.mu_target);
}

double reward_reflect(const GenerationTrace& trace,
                      const attention::AttentionProfile& profile,
                      const RewardConfig& cfg) {
  if (cfg.reflection_markers.empty())
    throw input_error("reward_reflect: reflection_markers is empty");
  if (!trace.frm_triggered) return 0.0;

  const int64_t from = trace.frm_trigger_pos.value_or(0);
  int64_t count = 0;
  int64_t first = -1;
  for (int64_t t = from; t < trace.steps; ++t) {
    if (cfg.reflection_markers.count(
            uncertainty::normalize_token(trace.tokens[static_cast<size_t>(t)].text))) {
      if (first < 0) first = t;
      ++count;
    }
  }
  if (count < 1 || count > 3) return 0.0;

  const int64_t window_end = std::min<int64_t>(first + cfg.reflection_window, trace.steps);
  double mean = 0.0;
  for (int64_t t = first; t < window_end; ++t)
    mean += profile.mid_share[static_cast<size_t>(t)];
  mean /= static_cast<double>(window_end - first);
  return mean >= cfg.tau_mid ? 0.4 : 0.0;
}

RewardBreakdown reward_total(const GenerationTrace& trace,
                             const attention::AttentionProfile& profile,
                             const uncertainty::PivotMask& mask,
                             std::string_view ground_truth, const RewardConfig& cfg) {
  RewardBreakdown out;
  out.match = match_answer(trace.answer_text(), ground_truth, cfg);
  out.r_outcome = out.match.score;
  out.n_pivot = mask.n_pivot;
  for (int64_t p : mask.pivot_positions)
    out.local_steps.push_back(
        {p, r_local_step(profile.mid_share[static_cast<size_t>(p)], true, cfg)});
  out.r_local = reward_local(profile, mask, cfg);
  out.r_global = reward_global(profile, cfg);
  out.r_reflect = reward_reflect(trace, profile, cfg);
  const double r_visual = out.r_local + out.r_global;
  out.r_total = out.r_outcome + r_visual + out.r_reflect;
  return out;
}

}  // namespace tracekit::reward
