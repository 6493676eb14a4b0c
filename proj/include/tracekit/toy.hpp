#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tracekit/config.hpp"
#include "tracekit/reflect.hpp"
#include "tracekit/rng.hpp"
#include "tracekit/trace.hpp"

namespace tracekit::toy {

// Scripted episode phases. Every generated position carries one.
enum class Phase { kDesc, kPivot, kVerify, kAnswer };

// Desk-scale environment: an "image" of visual_slots feature slots, one of
// which (salience-marked) carries the answer class. An episode walks
// description steps, one pivot step where a transition token competes with
// committing, verification steps, and a final answer step.
struct WorldConfig {
  int64_t visual_slots = 4;
  int64_t answer_classes = 3;
  int64_t desc_tokens = 2;
  int64_t desc_steps = 5;            // pivot sits at index desc_steps
  int64_t verify_steps = 3;
  int64_t reflect_verify_steps = 2;  // continuation checks before its answer
  int64_t layers = 4;                // simulated attention layers
};

struct Vocabulary {
  std::vector<std::string> words;
  int64_t desc_begin = 0;
  int64_t desc_count = 0;
  int64_t check = 0;         // transition token, enters checking context
  int64_t commit = 0;        // transition alternative, keeps inertia
  int64_t marker = 0;        // natural reflection marker
  int64_t instruct = 0;      // control token; spliced, never sampled
  int64_t answer_begin = 0;  // answer_classes consecutive ids

  int64_t size() const { return static_cast<int64_t>(words.size()); }
  bool is_answer(int64_t id) const { return id >= answer_begin; }

  static Vocabulary build(int64_t desc_tokens, int64_t answer_classes);
};

struct Episode {
  int64_t answer_slot = 0;
  int64_t answer_class = 0;
  std::string ground_truth;
};

class PivotWorld {
 public:
  explicit PivotWorld(const WorldConfig& cfg);

  const WorldConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  Episode sample_episode(Rng& rng) const;

  int64_t pivot_step() const { return cfg_.desc_steps; }
  // Length of the initial response: desc + pivot + verify + answer.
  int64_t initial_length() const { return cfg_.desc_steps + 1 + cfg_.verify_steps + 1; }
  // Phase of position t within the initial response.
  Phase initial_phase(int64_t t) const;

 private:
  WorldConfig cfg_;
  Vocabulary vocab_;
};

// Context the policy conditions on at one step. checked/reflecting are
// functions of the strict token prefix.
struct StepContext {
  Phase phase = Phase::kDesc;
  bool checked = false;     // a check token occurred earlier
  bool reflecting = false;  // a marker or instruction token occurred earlier
};

// Linear-softmax policy. A shared feature vector drives a per-layer
// attention head (slot logits vs a no-look sink) and a token head that
// additionally sees the mid-layer attention-weighted readout of the slot
// features, so token log-probabilities are differentiable in the
// attention parameters.
class ToyPolicy {
 public:
  static constexpr int kFeatures = 5;  // bias, pivot, answer, checked, reflecting

  ToyPolicy() = default;
  ToyPolicy(const WorldConfig& world, const Vocabulary& vocab);

  Eigen::MatrixXd token_weights;  // vocab x (kFeatures + answer_classes)
  Eigen::MatrixXd attn_pull;      // layers x kFeatures
  Eigen::VectorXd attn_salience;  // layers
  Eigen::VectorXd attn_sink;      // layers

  std::vector<int> mid_layers;  // 1-based, drives the readout

  int64_t param_count() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& params);

  struct StepEval {
    Eigen::VectorXd features;   // kFeatures
    Eigen::MatrixXd attention;  // layers x (slots + 1), last column = sink
    Eigen::VectorXd readout;    // answer_classes
    Eigen::VectorXd logits;     // vocab (instruct masked out)
    Eigen::VectorXd probs;      // vocab, instruct entry exactly 0
  };

  StepEval eval_step(const PivotWorld& world, const Episode& episode,
                     const StepContext& ctx) const;

  double logprob(const StepEval& eval, int64_t token_id) const;
};

struct RolloutResult {
  GenerationTrace trace;              // packaged y_train view of the episode
  std::vector<double> logprobs;       // per y_train token at rollout time
  std::vector<Phase> phases;          // per y_train token
  reflect::EditedTrajectory edit;     // trigger/splice/excise record
  Episode episode;
};

// G independent samples of the same episode. Forced-reflection editing is
// applied per rollout with probability cfg.trigger_prob when enabled; the
// packaged trace and log-probabilities are re-evaluated teacher-forced on
// the excised training sequence. temperature 0 means greedy.
std::vector<RolloutResult> rollout_group(const PivotWorld& world, const ToyPolicy& policy,
                                         int64_t group_size, const Episode& episode,
                                         const RewardConfig& cfg, bool frm_enabled,
                                         double temperature, Rng& rng);

// (R_i - mean) / (population std + eps_adv); zero vector when all equal.
std::vector<double> group_advantages(std::span<const double> rewards,
                                     double eps_adv = 1e-8);

// Clipped surrogate, negative mean over tokens of
// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
double grpo_loss(std::span<const double> ratios, std::span<const double> advantages,
                 double clip_eps);

struct GrpoItem {
  Episode episode;
  std::vector<int64_t> token_ids;
  std::vector<Phase> phases;
  std::vector<double> old_logprobs;
  double advantage = 0.0;
};

struct SftItem {
  Episode episode;
  std::vector<int64_t> token_ids;
  std::vector<Phase> phases;
};

struct HybridLoss {
  double grpo = 0.0;
  double sft = 0.0;
  double total = 0.0;  // grpo + gamma_sft * sft (+ kl term when enabled)
  double kl = 0.0;
};

struct TrainConfig {
  WorldConfig world;
  RewardConfig reward;
  int64_t iterations = 300;
  int64_t group_size = 8;
  double learning_rate = 0.4;
  double clip_eps = 0.2;
  double eps_adv = 1e-8;
  double kl_coeff = 0.0;
  double temperature = 1.0;
  bool visual_reward = true;      // dual-track attention reward on/off
  bool forced_reflection = true;  // trajectory editing on/off
  uint64_t seed = 1;
  size_t replay_capacity = 256;
  int64_t sft_batch_cap = 64;     // newest replay records used per step
  int64_t eval_episodes = 64;

  void validate() const;
};

// Builds a config whose reward thresholds and layer sets fit the toy scale
// (mid layers {2,3}, tau_ent 0.6, single-token instruction).
TrainConfig default_toy_config();

// Objective value at the current parameters with rollout data held fixed;
// the finite-difference oracle evaluates exactly this.
HybridLoss hybrid_objective(const ToyPolicy& policy, const PivotWorld& world,
                            const std::vector<GrpoItem>& batch,
                            const std::vector<SftItem>& sft_batch,
                            const TrainConfig& cfg);

// Analytic gradient of hybrid_objective w.r.t. policy.flatten().
Eigen::VectorXd hybrid_gradient(const ToyPolicy& policy, const PivotWorld& world,
                                const std::vector<GrpoItem>& batch,
                                const std::vector<SftItem>& sft_batch,
                                const TrainConfig& cfg, HybridLoss* loss_out = nullptr);

// One plain gradient-descent step on the hybrid objective.
HybridLoss hybrid_step(ToyPolicy& policy, const PivotWorld& world,
                       const std::vector<GrpoItem>& batch,
                       const std::vector<SftItem>& sft_batch, const TrainConfig& cfg);

struct IterationStats {
  double mean_r_total = 0.0;
  double mean_r_outcome = 0.0;
  double mean_r_local = 0.0;
  double mean_r_global = 0.0;
  double mean_r_reflect = 0.0;
  double pivot_window_mid_share = 0.0;  // mean over the group
  double accuracy = 0.0;
  double loss_grpo = 0.0;
  double loss_sft = 0.0;
  int64_t replay_size = 0;
};

struct TrainingReport {
  std::vector<IterationStats> iterations;
  uint64_t seed = 0;
  std::string config_snapshot;  // JSON
  double final_accuracy = 0.0;
  double final_pivot_window_mid_share = 0.0;
  double final_mean_u_score = 0.0;
};

struct TrainOutcome {
  TrainingReport report;
  ToyPolicy policy;
  PivotWorld world;
  reflect::ReplayBuffer buffer;
};

TrainOutcome train(const TrainConfig& cfg);

// Mean pivot-window mid-layer share over [pivot, pivot + window) clipped
// to T, computed on a profile's mid_share series.
double pivot_window_share(std::span<const double> mid_share, int64_t pivot_step,
                          int64_t window);

// Mean attention-recovery score over fresh evaluation rollouts: per
// rollout, the mid-share series scored with pivot = the scripted pivot and
// reflect = first marker at/after it; no marker scores 0.
double eval_u_score(const PivotWorld& world, const ToyPolicy& policy,
                    const RewardConfig& cfg, bool frm_enabled, int64_t episodes,
                    double temperature, Rng& rng);

}  // namespace tracekit::toy
