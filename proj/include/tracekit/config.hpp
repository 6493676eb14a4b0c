#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace tracekit {

// Every threshold and constant used by the metric, reward and editing stack.
// Layer indices are 1-based throughout, matching the trace manifests.
struct RewardConfig {
  // Pivot detection (entropy threshold, nats).
  double tau_ent = 1.0;

  // Piecewise local-reward thresholds on the mid-layer attention share.
  double tau_high = 0.30;
  double tau_mid = 0.15;

  // Sparsity validity filter: a step/layer share is valid only when more
  // than kappa_min visual tokens carry head-averaged attention above
  // gamma_attn. kappa_min == 0 means "auto": max(1, ceil(0.05 * V)).
  double gamma_attn = 0.001;
  int64_t kappa_min = 0;

  // Global-bonus track.
  double w_global = 1.0;
  double mu_target = 0.20;

  // Layer sets, 1-based inclusive indices. Empty all_layers means 1..L.
  std::vector<int> mid_layers = {11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
  std::vector<int> all_layers = {};

  // Reflection window (tokens) for the reengagement average.
  int64_t reflection_window = 10;  // K

  // Forced-reflection trigger probability and replay admission threshold.
  double trigger_prob = 0.5;  // q
  double tau_buf = 0.8;

  // Numeric answer matching tolerances.
  double eps_abs = 1e-3;
  double eps_rel = 1e-3;
  double eps_0 = 1e-8;

  // Covariance regularization, relative to the mean diagonal of the
  // empirical covariance (absolute floor 1e-6); see probe::auto_lambda.
  double lambda_reg = 1e-3;

  // Weight of the auxiliary SFT term in the hybrid objective.
  double gamma_sft = 0.1;

  // Natural reflection markers counted by the format reward, and the
  // transition lexicon anchoring trigger decisions. Matching is on
  // normalized whole tokens (case-folded, edge punctuation stripped).
  std::set<std::string> reflection_markers = {"wait"};
  std::set<std::string> transition_lexicon = {
      "however", "wait", "therefore", "but", "first", "alternatively", "actually"};

  // Instruction spliced after the initial response when reflection is
  // forced; whitespace-tokenized, excised by span before training.
  std::string instruction_text = "<reflect> check the image before continuing";

  // Throws input_error when an invariant is violated
  // (tau_mid < tau_high, 0 <= q <= 1, K >= 1, lambda_reg > 0,
  //  explicit kappa_min >= 1, explicit mid_layers subset of all_layers).
  void validate() const;

  int64_t effective_kappa_min(int64_t visual_tokens) const;
  std::vector<int> effective_mid_layers(int64_t layers) const;
  std::vector<int> effective_all_layers(int64_t layers) const;
};

void to_json(nlohmann::json& j, const RewardConfig& cfg);
void from_json(const nlohmann::json& j, RewardConfig& cfg_out);

// Loads and validates a config file (JSON object; unknown keys rejected).
RewardConfig load_config(const std::filesystem::path& path);

}  // namespace tracekit
