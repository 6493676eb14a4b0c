#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_helpers.hpp"
#include "tracekit/attention.hpp"
#include "tracekit/errors.hpp"
#include "tracekit/reward.hpp"
#include "tracekit/toy.hpp"
#include "tracekit/trace.hpp"
#include "tracekit/uncertainty.hpp"

using namespace tracekit;
using namespace tracekit::toy;

namespace {

TrainConfig small_cfg() {
  auto cfg = default_toy_config();
  cfg.iterations = 5;
  cfg.group_size = 4;
  cfg.eval_episodes = 8;
  return cfg;
}

// Tiny policy profile that stays at or under 64 parameters for
// finite-difference sweeps: vocab 8, 2 answer classes, 2 layers.
TrainConfig fd_cfg() {
  auto cfg = default_toy_config();
  cfg.world.visual_slots = 2;
  cfg.world.answer_classes = 2;
  cfg.world.desc_tokens = 1;
  cfg.world.layers = 2;
  cfg.world.desc_steps = 2;
  cfg.world.verify_steps = 2;
  cfg.world.reflect_verify_steps = 1;
  cfg.reward.mid_layers = {1, 2};
  cfg.group_size = 4;
  return cfg;
}

}  // namespace

TEST_CASE("group_advantages normalizes by the population std") {
  const std::vector<double> two = {1.0, 0.0};
  const auto a2 = group_advantages(two, 1e-12);
  CHECK(a2[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(a2[1] == doctest::Approx(-1.0).epsilon(1e-9));

  const std::vector<double> equal = {0.7, 0.7, 0.7};
  for (double a : group_advantages(equal, 1e-8)) CHECK(a == 0.0);

  const std::vector<double> three = {2.0, 1.0, 0.0};
  const auto a3 = group_advantages(three, 1e-12);
  CHECK(a3[0] == doctest::Approx(1.2247448713915890).epsilon(1e-9));
  CHECK(a3[1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(a3[2] == doctest::Approx(-1.2247448713915890).epsilon(1e-9));

  const std::vector<double> one = {1.0};
  CHECK_THROWS_AS(group_advantages(one, 1e-8), input_error);
}

TEST_CASE("advantages sum to zero with unit population variance") {
  Rng rng(4);
  for (int round = 0; round < 30; ++round) {
    std::vector<double> rewards(8);
    for (auto& r : rewards) r = rng.uniform() * 2.0;
    const auto adv = group_advantages(rewards, 1e-12);
    double sum = 0.0, var = 0.0;
    for (double a : adv) sum += a;
    CHECK(std::fabs(sum) < 1e-9);
    bool all_equal = true;
    for (double r : rewards) all_equal = all_equal && r == rewards[0];
    if (!all_equal) {
      for (double a : adv) var += a * a;
      var /= static_cast<double>(adv.size());
      CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("grpo_loss clips the surrogate") {
  // ratio=1 everywhere -> loss = -mean(A)
  const std::vector<double> ratios = {1.0, 1.0, 1.0};
  const std::vector<double> advantages = {0.5, -0.2, 0.3};
  CHECK(grpo_loss(ratios, advantages, 0.2) ==
        doctest::Approx(-(0.5 - 0.2 + 0.3) / 3.0).epsilon(1e-12));

  // A = 0 everywhere -> 0
  const std::vector<double> zero_adv = {0.0, 0.0};
  const std::vector<double> mixed_ratios = {1.5, 0.5};
  CHECK(grpo_loss(mixed_ratios, zero_adv, 0.2) == 0.0);

  // ratio 1.5, A 1, eps 0.2 -> clipped to 1.2
  const std::vector<double> r15 = {1.5};
  const std::vector<double> a_pos = {1.0};
  const std::vector<double> a_neg = {-1.0};
  CHECK(grpo_loss(r15, a_pos, 0.2) == doctest::Approx(-1.2).epsilon(1e-12));
  // negative advantage: min picks the unclipped (more negative) branch
  CHECK(grpo_loss(r15, a_neg, 0.2) == doctest::Approx(1.5).epsilon(1e-12));

  const std::vector<double> r1 = {1.0};
  const std::vector<double> a2 = {1.0, 2.0};
  const std::vector<double> r0 = {0.0};
  CHECK_THROWS_AS(grpo_loss(r1, a2, 0.2), input_error);
  CHECK_THROWS_AS(grpo_loss(r0, a_pos, 0.2), input_error);
}

TEST_CASE("rollout groups are reproducible and pass validation") {
  const auto cfg = small_cfg();
  PivotWorld world(cfg.world);
  ToyPolicy policy(cfg.world, world.vocab());
  policy.mid_layers = cfg.reward.effective_mid_layers(cfg.world.layers);

  Rng rng_a(99);
  const auto episode_a = world.sample_episode(rng_a);
  const auto group_a = rollout_group(world, policy, 4, episode_a, cfg.reward, true,
                                     1.0, rng_a);

  Rng rng_b(99);
  const auto episode_b = world.sample_episode(rng_b);
  const auto group_b = rollout_group(world, policy, 4, episode_b, cfg.reward, true,
                                     1.0, rng_b);

  REQUIRE(group_a.size() == 4);
  for (size_t g = 0; g < 4; ++g) {
    CHECK(group_a[g].trace.tokens == group_b[g].trace.tokens);
    CHECK(group_a[g].trace.step_distributions == group_b[g].trace.step_distributions);
    CHECK(group_a[g].trace.attention == group_b[g].trace.attention);
    CHECK(group_a[g].logprobs == group_b[g].logprobs);

    const auto report = validate_trace(group_a[g].trace);
    CHECK(report.ok());
  }
}

TEST_CASE("temperature zero makes rollouts identical within the group") {
  const auto cfg = small_cfg();
  PivotWorld world(cfg.world);
  ToyPolicy policy(cfg.world, world.vocab());
  Rng rng(3);
  const auto episode = world.sample_episode(rng);
  const auto group = rollout_group(world, policy, 4, episode, cfg.reward, false,
                                   0.0, rng);
  for (size_t g = 1; g < group.size(); ++g)
    CHECK(group[g].trace.tokens == group[0].trace.tokens);
}

TEST_CASE("edited rollouts carry no instruction token and keep trigger metadata") {
  auto cfg = small_cfg();
  cfg.reward.trigger_prob = 1.0;
  PivotWorld world(cfg.world);
  ToyPolicy policy(cfg.world, world.vocab());
  Rng rng(17);

  int triggered_seen = 0;
  for (int round = 0; round < 10; ++round) {
    const auto episode = world.sample_episode(rng);
    const auto group =
        rollout_group(world, policy, 4, episode, cfg.reward, true, 1.0, rng);
    for (const auto& rr : group) {
      for (const auto& tok : rr.trace.tokens) CHECK(tok.text != "<reflect>");
      if (rr.edit.triggered) {
        ++triggered_seen;
        REQUIRE(rr.trace.frm_trigger_pos.has_value());
        CHECK(*rr.trace.frm_trigger_pos == world.initial_length());
        CHECK(rr.trace.steps ==
              world.initial_length() + cfg.world.reflect_verify_steps + 1);
        CHECK(rr.trace.answer_span.begin == rr.trace.steps - 1);
      } else {
        CHECK(rr.trace.steps == world.initial_length());
      }
    }
  }
  CHECK(triggered_seen > 0);  // q=1: every rollout with a transition token
}

TEST_CASE("hybrid objective: gamma_sft 0 reduces to pure GRPO, empty buffer zero SFT") {
  const auto cfg = small_cfg();
  PivotWorld world(cfg.world);
  ToyPolicy policy(cfg.world, world.vocab());
  policy.mid_layers = cfg.reward.effective_mid_layers(cfg.world.layers);
  Rng rng(5);
  const auto episode = world.sample_episode(rng);
  const auto group =
      rollout_group(world, policy, 4, episode, cfg.reward, false, 1.0, rng);

  std::vector<GrpoItem> batch;
  std::vector<double> rewards;
  for (const auto& rr : group) {
    GrpoItem item;
    item.episode = rr.episode;
    for (const auto& tok : rr.edit.train_tokens) item.token_ids.push_back(tok.id);
    item.phases = rr.phases;
    item.old_logprobs = rr.logprobs;
    batch.push_back(item);
    rewards.push_back(rng.uniform());
  }
  const auto adv = group_advantages(rewards, 1e-8);
  for (size_t i = 0; i < batch.size(); ++i) batch[i].advantage = adv[i];

  // Empty SFT batch -> sft term 0.
  const auto loss_empty = hybrid_objective(policy, world, batch, {}, cfg);
  CHECK(loss_empty.sft == 0.0);
  CHECK(loss_empty.total == doctest::Approx(loss_empty.grpo).epsilon(1e-12));

  // gamma_sft 0: update identical to the pure-GRPO update.
  std::vector<SftItem> sft_batch;
  sft_batch.push_back({episode, batch[0].token_ids, batch[0].phases});

  auto cfg_no_sft = cfg;
  cfg_no_sft.reward.gamma_sft = 0.0;
  ToyPolicy p1 = policy;
  hybrid_step(p1, world, batch, sft_batch, cfg_no_sft);
  ToyPolicy p2 = policy;
  hybrid_step(p2, world, batch, {}, cfg_no_sft);
  CHECK(p1.flatten() == p2.flatten());

  // With gamma_sft > 0 the SFT term matches a direct evaluation.
  const auto loss_sft = hybrid_objective(policy, world, batch, sft_batch, cfg);
  CHECK(loss_sft.sft > 0.0);
  CHECK(loss_sft.total ==
        doctest::Approx(loss_sft.grpo + cfg.reward.gamma_sft * loss_sft.sft)
            .epsilon(1e-12));
}

TEST_CASE("analytic gradient matches central finite differences") {
  auto cfg = fd_cfg();
  PivotWorld world(cfg.world);
  ToyPolicy policy(cfg.world, world.vocab());
  policy.mid_layers = cfg.reward.effective_mid_layers(cfg.world.layers);
  CHECK(policy.param_count() <= 64);

  Rng rng(11);
  const auto episode = world.sample_episode(rng);
  auto group = rollout_group(world, policy, cfg.group_size, episode, cfg.reward, true,
                             1.0, rng);

  std::vector<GrpoItem> batch;
  std::vector<double> rewards;
  for (const auto& rr : group) {
    GrpoItem item;
    item.episode = rr.episode;
    for (const auto& tok : rr.edit.train_tokens) item.token_ids.push_back(tok.id);
    item.phases = rr.phases;
    item.old_logprobs = rr.logprobs;
    batch.push_back(item);
    rewards.push_back(rng.uniform() * 2.0 - 0.5);
  }
  const auto adv = group_advantages(rewards, 1e-8);
  for (size_t i = 0; i < batch.size(); ++i) batch[i].advantage = adv[i];

  std::vector<SftItem> sft_batch;
  sft_batch.push_back({episode, batch[0].token_ids, batch[0].phases});
  sft_batch.push_back({episode, batch[1].token_ids, batch[1].phases});

  const Eigen::VectorXd theta0 = policy.flatten();
  const int64_t n = policy.param_count();

  for (int point = 0; point < 3; ++point) {
    // Random parameter point near the init.
    ToyPolicy p = policy;
    Eigen::VectorXd theta = theta0;
    for (int64_t i = 0; i < n; ++i) theta[i] += 0.2 * (rng.uniform() - 0.5);
    p.unflatten(theta);

    const Eigen::VectorXd analytic = hybrid_gradient(p, world, batch, sft_batch, cfg);

    Eigen::VectorXd numeric(n);
    const double h = 1e-6;
    for (int64_t i = 0; i < n; ++i) {
      ToyPolicy plus = p;
      ToyPolicy minus = p;
      Eigen::VectorXd tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      plus.unflatten(tp);
      minus.unflatten(tm);
      const double fp = hybrid_objective(plus, world, batch, sft_batch, cfg).total;
      const double fm = hybrid_objective(minus, world, batch, sft_batch, cfg).total;
      numeric[i] = (fp - fm) / (2.0 * h);
    }

    const double denom = std::max(analytic.norm(), numeric.norm());
    if (denom > 0.0) {
      const double rel = (analytic - numeric).norm() / denom;
      CHECK(rel < 1e-4);
    }
  }
}

TEST_CASE("train is deterministic and records the configured series") {
  auto cfg = small_cfg();
  cfg.seed = 12345;
  const auto a = train(cfg);
  const auto b = train(cfg);
  REQUIRE(a.report.iterations.size() == static_cast<size_t>(cfg.iterations));
  for (size_t i = 0; i < a.report.iterations.size(); ++i) {
    CHECK(a.report.iterations[i].mean_r_total == b.report.iterations[i].mean_r_total);
    CHECK(a.report.iterations[i].pivot_window_mid_share ==
          b.report.iterations[i].pivot_window_mid_share);
    CHECK(a.report.iterations[i].accuracy == b.report.iterations[i].accuracy);
  }
  CHECK(a.report.final_accuracy == b.report.final_accuracy);
  CHECK(a.report.final_pivot_window_mid_share == b.report.final_pivot_window_mid_share);
  CHECK(a.report.final_mean_u_score == b.report.final_mean_u_score);
  CHECK(a.policy.flatten() == b.policy.flatten());

  // 0 iterations: report with final metrics only
  auto zero_cfg = small_cfg();
  zero_cfg.iterations = 0;
  const auto zero = train(zero_cfg);
  CHECK(zero.report.iterations.empty());
}

TEST_CASE("replay buffer records always satisfy the admission threshold") {
  auto cfg = small_cfg();
  cfg.iterations = 20;
  const auto outcome = train(cfg);
  for (const auto& record : outcome.buffer.records()) {
    CHECK(record.match_score >= cfg.reward.tau_buf);
    // re-scoring from stored tokens agrees
    std::string answer;
    for (int64_t i = record.answer_span.begin; i < record.answer_span.end; ++i) {
      if (!answer.empty()) answer += ' ';
      answer += record.train_tokens[static_cast<size_t>(i)].text;
    }
    CHECK(reward::match_answer(answer, record.ground_truth, cfg.reward).score ==
          record.match_score);
  }
}

TEST_CASE("disabling the visual reward zeroes its components") {
  auto cfg = small_cfg();
  cfg.visual_reward = false;
  cfg.iterations = 6;
  const auto outcome = train(cfg);
  for (const auto& stats : outcome.report.iterations) {
    CHECK(stats.mean_r_local == 0.0);
    CHECK(stats.mean_r_global == 0.0);
  }
}

TEST_CASE("disabling forced reflection keeps traces unedited") {
  auto cfg = small_cfg();
  cfg.forced_reflection = false;
  cfg.iterations = 6;
  const auto outcome = train(cfg);
  for (const auto& stats : outcome.report.iterations) CHECK(stats.mean_r_reflect == 0.0);
}

TEST_CASE("with both components off the loop is vanilla outcome-GRPO") {
  auto cfg = small_cfg();
  cfg.visual_reward = false;
  cfg.forced_reflection = false;
  cfg.iterations = 10;
  const auto outcome = train(cfg);
  for (const auto& stats : outcome.report.iterations) {
    CHECK(stats.mean_r_local == 0.0);
    CHECK(stats.mean_r_global == 0.0);
    CHECK(stats.mean_r_reflect == 0.0);
    CHECK(stats.mean_r_total == stats.mean_r_outcome);
  }
}

TEST_CASE("pivot_window_share averages the clipped window") {
  const std::vector<double> series = {0.1, 0.2, 0.3, 0.4};
  CHECK(pivot_window_share(series, 1, 2) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(pivot_window_share(series, 2, 10) == doctest::Approx(0.35).epsilon(1e-12));
  CHECK_THROWS_AS(pivot_window_share(series, 4, 2), input_error);
}
