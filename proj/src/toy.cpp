#include "tracekit/toy.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include <nlohmann/json.hpp>

#include "tracekit/attention.hpp"
#include "tracekit/errors.hpp"
#include "tracekit/reward.hpp"
#include "tracekit/uncertainty.hpp"

namespace tracekit::toy {

namespace {

const char* kAnswerWords[] = {"red", "blue", "green", "amber", "violet", "teal"};
constexpr int64_t kMaxAnswerClasses = 6;

// Feature indices shared by both heads.
constexpr int kBias = 0;
constexpr int kIsPivot = 1;
constexpr int kIsAnswer = 2;
constexpr int kChecked = 3;
constexpr int kReflecting = 4;

}  // namespace

Vocabulary Vocabulary::build(int64_t desc_tokens, int64_t answer_classes) {
  if (answer_classes < 2 || answer_classes > kMaxAnswerClasses)
    throw input_error("toy vocabulary supports 2.." + std::to_string(kMaxAnswerClasses) +
                      " answer classes");
  static const char* kDescWords[] = {"the", "shows", "image", "a"};
  if (desc_tokens < 1 || desc_tokens > 4)
    throw input_error("toy vocabulary supports 1..4 description tokens");
  Vocabulary v;
  v.words.assign(kDescWords, kDescWords + desc_tokens);
  v.desc_begin = 0;
  v.desc_count = desc_tokens;
  v.check = static_cast<int64_t>(v.words.size());
  v.words.push_back("however");
  v.commit = static_cast<int64_t>(v.words.size());
  v.words.push_back("therefore");
  v.marker = static_cast<int64_t>(v.words.size());
  v.words.push_back("wait");
  v.instruct = static_cast<int64_t>(v.words.size());
  v.words.push_back("<reflect>");
  v.answer_begin = static_cast<int64_t>(v.words.size());
  for (int64_t c = 0; c < answer_classes; ++c) v.words.push_back(kAnswerWords[c]);
  return v;
}

PivotWorld::PivotWorld(const WorldConfig& cfg)
    : cfg_(cfg), vocab_(Vocabulary::build(cfg.desc_tokens, cfg.answer_classes)) {
  if (cfg.visual_slots < 2) throw input_error("toy world needs at least 2 visual slots");
  if (cfg.desc_steps < 1 || cfg.verify_steps < 1 || cfg.reflect_verify_steps < 1)
    throw input_error("toy world phase lengths must be >= 1");
  if (cfg.layers < 2) throw input_error("toy world needs at least 2 layers");
}

Episode PivotWorld::sample_episode(Rng& rng) const {
  Episode ep;
  ep.answer_slot = static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg_.visual_slots)));
  ep.answer_class =
      static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg_.answer_classes)));
  ep.ground_truth = vocab_.words[static_cast<size_t>(vocab_.answer_begin + ep.answer_class)];
  return ep;
}

Phase PivotWorld::initial_phase(int64_t t) const {
  if (t < cfg_.desc_steps) return Phase::kDesc;
  if (t == cfg_.desc_steps) return Phase::kPivot;
  if (t < initial_length() - 1) return Phase::kVerify;
  return Phase::kAnswer;
}

ToyPolicy::ToyPolicy(const WorldConfig& world, const Vocabulary& vocab) {
  const int64_t vocab_size = vocab.size();
  const int64_t n_cls = world.answer_classes;
  token_weights = Eigen::MatrixXd::Zero(vocab_size, kFeatures + n_cls);
  attn_pull = Eigen::MatrixXd::Zero(world.layers, kFeatures);
  attn_salience = Eigen::VectorXd::Zero(world.layers);
  attn_sink = Eigen::VectorXd::Zero(world.layers);

  // Untrained behavior: fluent description, a genuinely uncertain pivot,
  // rare spontaneous markers, attention parked on the sink unless the
  // context has entered checking or reflecting mode.
  for (int64_t d_tok = 0; d_tok < vocab.desc_count; ++d_tok)
    token_weights(vocab.desc_begin + d_tok, kBias) = 1.0;
  token_weights(vocab.check, kIsPivot) = 1.5;
  token_weights(vocab.commit, kIsPivot) = 1.5;
  token_weights(vocab.marker, kBias) = -1.0;
  token_weights(vocab.marker, kReflecting) = 3.5;
  for (int64_t c = 0; c < n_cls; ++c) {
    token_weights(vocab.answer_begin + c, kIsAnswer) = 2.0;
    // Readout coupling: attending the answer slot raises the logit of the
    // class it carries.
    token_weights(vocab.answer_begin + c, kFeatures + c) = 1.2;
  }

  attn_pull.col(kChecked).setConstant(1.0);
  attn_pull.col(kReflecting).setConstant(1.8);
  attn_salience.setConstant(0.5);
  attn_sink.setConstant(3.5);

  const int mid_lo = static_cast<int>(world.layers / 2);
  mid_layers = {mid_lo, mid_lo + 1};
}

int64_t ToyPolicy::param_count() const {
  return token_weights.size() + attn_pull.size() + attn_salience.size() + attn_sink.size();
}

Eigen::VectorXd ToyPolicy::flatten() const {
  Eigen::VectorXd out(param_count());
  int64_t at = 0;
  for (int64_t r = 0; r < token_weights.rows(); ++r)
    for (int64_t c = 0; c < token_weights.cols(); ++c) out[at++] = token_weights(r, c);
  for (int64_t r = 0; r < attn_pull.rows(); ++r)
    for (int64_t c = 0; c < attn_pull.cols(); ++c) out[at++] = attn_pull(r, c);
  for (int64_t i = 0; i < attn_salience.size(); ++i) out[at++] = attn_salience[i];
  for (int64_t i = 0; i < attn_sink.size(); ++i) out[at++] = attn_sink[i];
  return out;
}

void ToyPolicy::unflatten(const Eigen::VectorXd& params) {
  if (params.size() != param_count())
    throw input_error("unflatten: expected " + std::to_string(param_count()) +
                      " parameters, got " + std::to_string(params.size()));
  int64_t at = 0;
  for (int64_t r = 0; r < token_weights.rows(); ++r)
    for (int64_t c = 0; c < token_weights.cols(); ++c) token_weights(r, c) = params[at++];
  for (int64_t r = 0; r < attn_pull.rows(); ++r)
    for (int64_t c = 0; c < attn_pull.cols(); ++c) attn_pull(r, c) = params[at++];
  for (int64_t i = 0; i < attn_salience.size(); ++i) attn_salience[i] = params[at++];
  for (int64_t i = 0; i < attn_sink.size(); ++i) attn_sink[i] = params[at++];
}

ToyPolicy::StepEval ToyPolicy::eval_step(const PivotWorld& world, const Episode& episode,
                                         const StepContext& ctx) const {
  const auto& wc = world.config();
  const auto& vocab = world.vocab();
  const int64_t slots = wc.visual_slots;
  const int64_t n_cls = wc.answer_classes;
  const int64_t layers = attn_pull.rows();

  StepEval ev;
  ev.features = Eigen::VectorXd::Zero(kFeatures);
  ev.features[kBias] = 1.0;
  ev.features[kIsPivot] = ctx.phase == Phase::kPivot ? 1.0 : 0.0;
  ev.features[kIsAnswer] = ctx.phase == Phase::kAnswer ? 1.0 : 0.0;
  ev.features[kChecked] = ctx.checked ? 1.0 : 0.0;
  ev.features[kReflecting] = ctx.reflecting ? 1.0 : 0.0;

  ev.attention.resize(layers, slots + 1);
  for (int64_t l0 = 0; l0 < layers; ++l0) {
    const double pull = attn_pull.row(l0).dot(ev.features);
    Eigen::VectorXd logits(slots + 1);
    for (int64_t j = 0; j < slots; ++j)
      logits[j] = pull + (j == episode.answer_slot ? attn_salience[l0] : 0.0);
    logits[slots] = attn_sink[l0];
    const double max_logit = logits.maxCoeff();
    Eigen::VectorXd ex = (logits.array() - max_logit).exp();
    ev.attention.row(l0) = (ex / ex.sum()).transpose();
  }

  // Mid-layer attention-weighted readout of slot class features: the
  // answer slot carries a one-hot class vector, distractors a uniform one.
  ev.readout = Eigen::VectorXd::Zero(n_cls);
  double distractor_mass = 0.0;
  double answer_mass = 0.0;
  for (int layer : mid_layers) {
    for (int64_t j = 0; j < slots; ++j) {
      if (j == episode.answer_slot)
        answer_mass += ev.attention(layer - 1, j);
      else
        distractor_mass += ev.attention(layer - 1, j);
    }
  }
  const double inv_mid = 1.0 / static_cast<double>(mid_layers.size());
  ev.readout.array() += distractor_mass * inv_mid / static_cast<double>(n_cls);
  ev.readout[episode.answer_class] += answer_mass * inv_mid;

  Eigen::VectorXd joint(kFeatures + n_cls);
  joint << ev.features, ev.readout;
  ev.logits = token_weights * joint;

  // Instruction token is spliced by the editor, never emitted.
  Eigen::VectorXd masked = ev.logits;
  masked[vocab.instruct] = -std::numeric_limits<double>::infinity();
  const double max_logit = masked.maxCoeff();
  Eigen::VectorXd ex(masked.size());
  for (int64_t i = 0; i < masked.size(); ++i)
    ex[i] = std::isinf(masked[i]) ? 0.0 : std::exp(masked[i] - max_logit);
  ev.probs = ex / ex.sum();
  return ev;
}

double ToyPolicy::logprob(const StepEval& ev, int64_t token_id) const {
  return std::log(ev.probs[token_id]);
}

namespace {

// Sampling/evaluation distribution at a given temperature; temperature 0
// collapses to the argmax one-hot.
Eigen::VectorXd tempered_probs(const ToyPolicy::StepEval& ev, int64_t instruct_id,
                               double temperature) {
  if (temperature == 1.0) return ev.probs;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(ev.probs.size());
  if (temperature == 0.0) {
    Eigen::Index best = 0;
    ev.probs.maxCoeff(&best);
    out[best] = 1.0;
    return out;
  }
  Eigen::VectorXd masked = ev.logits / temperature;
  masked[instruct_id] = -std::numeric_limits<double>::infinity();
  const double max_logit = masked.maxCoeff();
  for (int64_t i = 0; i < masked.size(); ++i)
    out[i] = std::isinf(masked[i]) ? 0.0 : std::exp(masked[i] - max_logit);
  out /= out.sum();
  return out;
}

int64_t sample_from(const Eigen::VectorXd& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (int64_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;  // guard against rounding at u ~ 1
}

struct ContextTracker {
  bool checked = false;
  bool reflecting = false;

  void observe(const Vocabulary& vocab, int64_t token_id) {
    if (token_id == vocab.check) checked = true;
    if (token_id == vocab.marker || token_id == vocab.instruct) reflecting = true;
  }
};

int64_t resolve_token_id(const Vocabulary& vocab, const Token& token) {
  if (token.id >= 0 && token.id < vocab.size()) return token.id;
  for (int64_t i = 0; i < vocab.size(); ++i)
    if (vocab.words[static_cast<size_t>(i)] == token.text) return i;
  return -1;
}

// Teacher-forced pass over a finished token sequence: sampling-law
// distributions, per-layer slot attention rows and log-probabilities.
struct SequenceEval {
  std::vector<double> logprobs;
  std::vector<float> distributions;  // T x vocab
  std::vector<float> attention;      // T x L x V (head-averaged layout)
  std::vector<Eigen::VectorXd> probs_rows;
};

SequenceEval evaluate_sequence(const PivotWorld& world, const ToyPolicy& policy,
                               const Episode& episode,
                               const std::vector<int64_t>& token_ids,
                               const std::vector<Phase>& phases, double temperature) {
  const auto& vocab = world.vocab();
  const auto& wc = world.config();
  const int64_t T = static_cast<int64_t>(token_ids.size());
  SequenceEval out;
  out.logprobs.resize(static_cast<size_t>(T));
  out.distributions.resize(static_cast<size_t>(T * vocab.size()));
  out.attention.resize(static_cast<size_t>(T * wc.layers * wc.visual_slots));
  out.probs_rows.resize(static_cast<size_t>(T));

  ContextTracker tracker;
  for (int64_t t = 0; t < T; ++t) {
    const StepContext ctx{phases[static_cast<size_t>(t)], tracker.checked,
                          tracker.reflecting};
    const auto ev = policy.eval_step(world, episode, ctx);
    const auto probs = tempered_probs(ev, vocab.instruct, temperature);
    out.probs_rows[static_cast<size_t>(t)] = probs;
    out.logprobs[static_cast<size_t>(t)] = std::log(probs[token_ids[static_cast<size_t>(t)]]);
    for (int64_t v = 0; v < vocab.size(); ++v)
      out.distributions[static_cast<size_t>(t * vocab.size() + v)] =
          static_cast<float>(probs[v]);
    for (int64_t l0 = 0; l0 < wc.layers; ++l0)
      for (int64_t j = 0; j < wc.visual_slots; ++j)
        out.attention[static_cast<size_t>((t * wc.layers + l0) * wc.visual_slots + j)] =
            static_cast<float>(ev.attention(l0, j));
    tracker.observe(vocab, token_ids[static_cast<size_t>(t)]);
  }
  return out;
}

GenerationTrace package_trace(const PivotWorld& world,
                              const std::vector<int64_t>& token_ids,
                              const SequenceEval& eval, Span answer_span,
                              bool frm_triggered, std::optional<int64_t> trigger_pos,
                              const std::string& trace_id) {
  const auto& vocab = world.vocab();
  const auto& wc = world.config();
  GenerationTrace trace;
  trace.trace_id = trace_id;
  trace.steps = static_cast<int64_t>(token_ids.size());
  trace.layers = wc.layers;
  trace.heads = 1;
  trace.visual_tokens = wc.visual_slots;
  trace.vocab = vocab.size();
  trace.layout = AttentionLayout::kHeadAvg;
  trace.visual_region = {0, wc.visual_slots};
  trace.answer_span = answer_span;
  trace.frm_triggered = frm_triggered;
  trace.frm_trigger_pos = trigger_pos;
  for (int64_t id : token_ids)
    trace.tokens.push_back({vocab.words[static_cast<size_t>(id)], id});
  trace.step_distributions = eval.distributions;
  trace.attention = eval.attention;
  return trace;
}

}  // namespace

std::vector<RolloutResult> rollout_group(const PivotWorld& world, const ToyPolicy& policy,
                                         int64_t group_size, const Episode& episode,
                                         const RewardConfig& cfg, bool frm_enabled,
                                         double temperature, Rng& rng) {
  if (group_size < 1) throw input_error("rollout_group: group_size must be >= 1");
  const auto& vocab = world.vocab();
  const auto& wc = world.config();

  std::vector<RolloutResult> out;
  out.reserve(static_cast<size_t>(group_size));
  for (int64_t g = 0; g < group_size; ++g) {
    // Sample the initial response.
    std::vector<int64_t> y1_ids;
    std::vector<Token> y1_tokens;
    ContextTracker tracker;
    for (int64_t t = 0; t < world.initial_length(); ++t) {
      const StepContext ctx{world.initial_phase(t), tracker.checked, tracker.reflecting};
      const auto ev = policy.eval_step(world, episode, ctx);
      const int64_t id = sample_from(tempered_probs(ev, vocab.instruct, temperature), rng);
      y1_ids.push_back(id);
      y1_tokens.push_back({vocab.words[static_cast<size_t>(id)], id});
      tracker.observe(vocab, id);
    }
    const Span y1_answer{world.initial_length() - 1, world.initial_length()};

    // Reflection-mode continuation: the prompt carries the instruction, so
    // the reflecting flag is up before the first continuation step.
    auto generator = [&](const std::vector<Token>& prompt) {
      ContextTracker cont_tracker;
      for (const auto& tok : prompt) {
        const int64_t id = resolve_token_id(vocab, tok);
        if (id >= 0) cont_tracker.observe(vocab, id);
      }
      reflect::Continuation cont;
      const int64_t cont_len = wc.reflect_verify_steps + 1;
      for (int64_t t = 0; t < cont_len; ++t) {
        const Phase phase = t + 1 == cont_len ? Phase::kAnswer : Phase::kVerify;
        const StepContext ctx{phase, cont_tracker.checked, cont_tracker.reflecting};
        const auto ev = policy.eval_step(world, episode, ctx);
        const auto probs = tempered_probs(ev, vocab.instruct, temperature);
        const int64_t id = sample_from(probs, rng);
        cont.tokens.push_back({vocab.words[static_cast<size_t>(id)], id});
        cont.logprobs.push_back(std::log(probs[id]));
        cont_tracker.observe(vocab, id);
      }
      cont.answer_span = Span{cont_len - 1, cont_len};
      return cont;
    };

    RolloutResult rr;
    rr.episode = episode;
    if (frm_enabled) {
      rr.edit = reflect::edit_trajectory("rollout-" + std::to_string(g), y1_tokens,
                                         y1_answer, generator, cfg, rng);
    } else {
      rr.edit.id = "rollout-" + std::to_string(g);
      rr.edit.initial = y1_tokens;
      rr.edit.train_tokens = y1_tokens;
      rr.edit.answer_span = y1_answer;
    }

    std::vector<int64_t> train_ids;
    for (const auto& tok : rr.edit.train_tokens) train_ids.push_back(tok.id);
    rr.phases.assign(y1_ids.size(), Phase::kDesc);
    for (size_t t = 0; t < y1_ids.size(); ++t)
      rr.phases[t] = world.initial_phase(static_cast<int64_t>(t));
    if (rr.edit.triggered) {
      for (int64_t t = 0; t < wc.reflect_verify_steps; ++t)
        rr.phases.push_back(Phase::kVerify);
      rr.phases.push_back(Phase::kAnswer);
    }

    const auto eval =
        evaluate_sequence(world, policy, episode, train_ids, rr.phases, temperature);
    rr.logprobs = eval.logprobs;
    const std::optional<int64_t> trigger_pos =
        rr.edit.triggered ? std::optional<int64_t>(static_cast<int64_t>(y1_ids.size()))
                          : std::nullopt;
    rr.trace = package_trace(world, train_ids, eval, rr.edit.answer_span,
                             rr.edit.triggered, trigger_pos,
                             "rollout-" + std::to_string(g));
    out.push_back(std::move(rr));
  }
  return out;
}

std::vector<double> group_advantages(std::span<const double> rewards, double eps_adv) {
  if (rewards.size() < 2)
    throw input_error("group_advantages: needs a group of at least 2");
  bool all_equal = true;
  for (double r : rewards) all_equal = all_equal && r == rewards[0];
  if (all_equal) return std::vector<double>(rewards.size(), 0.0);
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;  // population variance
  const double denom = std::sqrt(var) + eps_adv;
  std::vector<double> out(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

double grpo_loss(std::span<const double> ratios, std::span<const double> advantages,
                 double clip_eps) {
  if (ratios.size() != advantages.size())
    throw input_error("grpo_loss: ratio/advantage length mismatch");
  if (ratios.empty()) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < ratios.size(); ++i) {
    const double r = ratios[i];
    if (!(r > 0.0)) throw input_error("grpo_loss: ratios must be positive");
    const double clipped = std::clamp(r, 1.0 - clip_eps, 1.0 + clip_eps);
    sum += std::min(r * advantages[i], clipped * advantages[i]);
  }
  return -sum / static_cast<double>(ratios.size());
}

void TrainConfig::validate() const {
  reward.validate();
  if (group_size < 2) throw input_error("train: group_size must be >= 2");
  if (iterations < 0) throw input_error("train: iterations must be >= 0");
  if (!(learning_rate > 0.0)) throw input_error("train: learning_rate must be > 0");
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw input_error("train: clip_eps must be in (0, 1)");
  if (temperature < 0.0) throw input_error("train: temperature must be >= 0");
  if (kl_coeff < 0.0) throw input_error("train: kl_coeff must be >= 0");
  if (sft_batch_cap < 1) throw input_error("train: sft_batch_cap must be >= 1");
}

TrainConfig default_toy_config() {
  TrainConfig cfg;
  cfg.reward.tau_ent = 0.6;  // toy vocabulary tops out near 2.2 nats
  cfg.reward.mid_layers = {2, 3};
  cfg.reward.instruction_text = "<reflect>";
  return cfg;
}

namespace {

struct GradAccum {
  Eigen::MatrixXd token_weights;
  Eigen::MatrixXd attn_pull;
  Eigen::VectorXd attn_salience;
  Eigen::VectorXd attn_sink;

  explicit GradAccum(const ToyPolicy& p)
      : token_weights(Eigen::MatrixXd::Zero(p.token_weights.rows(), p.token_weights.cols())),
        attn_pull(Eigen::MatrixXd::Zero(p.attn_pull.rows(), p.attn_pull.cols())),
        attn_salience(Eigen::VectorXd::Zero(p.attn_salience.size())),
        attn_sink(Eigen::VectorXd::Zero(p.attn_sink.size())) {}

  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(token_weights.size() + attn_pull.size() + attn_salience.size() +
                        attn_sink.size());
    int64_t at = 0;
    for (int64_t r = 0; r < token_weights.rows(); ++r)
      for (int64_t c = 0; c < token_weights.cols(); ++c) out[at++] = token_weights(r, c);
    for (int64_t r = 0; r < attn_pull.rows(); ++r)
      for (int64_t c = 0; c < attn_pull.cols(); ++c) out[at++] = attn_pull(r, c);
    for (int64_t i = 0; i < attn_salience.size(); ++i) out[at++] = attn_salience[i];
    for (int64_t i = 0; i < attn_sink.size(); ++i) out[at++] = attn_sink[i];
    return out;
  }
};

// Backpropagates weight * d(logprob of token y)/d(params) for one step.
void accumulate_logprob_grad(const ToyPolicy& policy, const PivotWorld& world,
                             const Episode& episode, const StepContext& ctx, int64_t y,
                             double temperature, double weight, GradAccum& grads) {
  if (weight == 0.0 || temperature == 0.0) return;
  const auto& vocab = world.vocab();
  const auto& wc = world.config();
  const int64_t n_cls = wc.answer_classes;
  const int64_t slots = wc.visual_slots;

  const auto ev = policy.eval_step(world, episode, ctx);
  const auto probs = tempered_probs(ev, vocab.instruct, temperature);

  // d logp_y / d logits = (1/temp) (e_y - p); instruction entry stays 0.
  Eigen::VectorXd g_logits = -probs / temperature;
  g_logits[y] += 1.0 / temperature;
  g_logits[vocab.instruct] = 0.0;
  g_logits *= weight;

  Eigen::VectorXd joint(ToyPolicy::kFeatures + n_cls);
  joint << ev.features, ev.readout;
  grads.token_weights.noalias() += g_logits * joint.transpose();

  // Chain through the readout into the mid-layer attention heads.
  const Eigen::VectorXd g_readout =
      policy.token_weights.rightCols(n_cls).transpose() * g_logits;
  const double inv_mid = 1.0 / static_cast<double>(policy.mid_layers.size());
  const double g_uniform = g_readout.sum() / static_cast<double>(n_cls);
  for (int layer : policy.mid_layers) {
    const int64_t l0 = layer - 1;
    Eigen::VectorXd g_att(slots + 1);
    for (int64_t j = 0; j < slots; ++j)
      g_att[j] = inv_mid * (j == episode.answer_slot ? g_readout[episode.answer_class]
                                                     : g_uniform);
    g_att[slots] = 0.0;

    const Eigen::VectorXd att = ev.attention.row(l0).transpose();
    const double dot = att.dot(g_att);
    const Eigen::VectorXd g_u = att.array() * (g_att.array() - dot);

    double pull_sum = 0.0;
    for (int64_t j = 0; j < slots; ++j) pull_sum += g_u[j];
    grads.attn_pull.row(l0) += pull_sum * ev.features.transpose();
    grads.attn_salience[l0] += g_u[episode.answer_slot];
    grads.attn_sink[l0] += g_u[slots];
  }
}

std::vector<StepContext> build_contexts(const PivotWorld& world,
                                        const std::vector<int64_t>& token_ids,
                                        const std::vector<Phase>& phases) {
  std::vector<StepContext> out;
  out.reserve(token_ids.size());
  ContextTracker tracker;
  for (size_t t = 0; t < token_ids.size(); ++t) {
    out.push_back({phases[t], tracker.checked, tracker.reflecting});
    tracker.observe(world.vocab(), token_ids[t]);
  }
  return out;
}

}  // namespace

HybridLoss hybrid_objective(const ToyPolicy& policy, const PivotWorld& world,
                            const std::vector<GrpoItem>& batch,
                            const std::vector<SftItem>& sft_batch,
                            const TrainConfig& cfg) {
  HybridLoss out;
  std::vector<double> ratios;
  std::vector<double> advantages;
  double kl_sum = 0.0;
  for (const auto& item : batch) {
    const auto contexts = build_contexts(world, item.token_ids, item.phases);
    for (size_t t = 0; t < item.token_ids.size(); ++t) {
      const auto ev = policy.eval_step(world, item.episode, contexts[t]);
      const auto probs = tempered_probs(ev, world.vocab().instruct, cfg.temperature);
      const double logp = std::log(probs[item.token_ids[t]]);
      const double ratio = std::exp(logp - item.old_logprobs[t]);
      ratios.push_back(ratio);
      advantages.push_back(item.advantage);
      const double diff = item.old_logprobs[t] - logp;
      kl_sum += std::exp(diff) - diff - 1.0;
    }
  }
  out.grpo = grpo_loss(ratios, advantages, cfg.clip_eps);
  out.kl = ratios.empty() ? 0.0 : kl_sum / static_cast<double>(ratios.size());

  if (!sft_batch.empty()) {
    double sum = 0.0;
    for (const auto& item : sft_batch) {
      const auto contexts = build_contexts(world, item.token_ids, item.phases);
      double seq = 0.0;
      for (size_t t = 0; t < item.token_ids.size(); ++t) {
        const auto ev = policy.eval_step(world, item.episode, contexts[t]);
        const auto probs = tempered_probs(ev, world.vocab().instruct, cfg.temperature);
        seq += std::log(probs[item.token_ids[t]]);
      }
      sum += -seq / static_cast<double>(item.token_ids.size());
    }
    out.sft = sum / static_cast<double>(sft_batch.size());
  }

  out.total = out.grpo + cfg.reward.gamma_sft * out.sft + cfg.kl_coeff * out.kl;
  return out;
}

Eigen::VectorXd hybrid_gradient(const ToyPolicy& policy, const PivotWorld& world,
                                const std::vector<GrpoItem>& batch,
                                const std::vector<SftItem>& sft_batch,
                                const TrainConfig& cfg, HybridLoss* loss_out) {
  GradAccum grads(policy);

  int64_t total_tokens = 0;
  for (const auto& item : batch) total_tokens += static_cast<int64_t>(item.token_ids.size());

  std::vector<double> ratios;
  std::vector<double> advantages;
  double kl_sum = 0.0;
  for (const auto& item : batch) {
    const auto contexts = build_contexts(world, item.token_ids, item.phases);
    for (size_t t = 0; t < item.token_ids.size(); ++t) {
      const auto ev = policy.eval_step(world, item.episode, contexts[t]);
      const auto probs = tempered_probs(ev, world.vocab().instruct, cfg.temperature);
      const double logp = std::log(probs[item.token_ids[t]]);
      const double ratio = std::exp(logp - item.old_logprobs[t]);
      ratios.push_back(ratio);
      advantages.push_back(item.advantage);

      const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
      const double unclipped_term = ratio * item.advantage;
      const double clipped_term = clipped * item.advantage;
      // d min / d logp: the unclipped branch moves with logp, the clipped
      // branch is constant in it.
      double d_logp = unclipped_term <= clipped_term ? unclipped_term : 0.0;
      double weight = -d_logp / static_cast<double>(total_tokens);

      const double diff = item.old_logprobs[t] - logp;
      kl_sum += std::exp(diff) - diff - 1.0;
      if (cfg.kl_coeff > 0.0) {
        weight += cfg.kl_coeff * (1.0 - std::exp(diff)) /
                  static_cast<double>(total_tokens);
      }
      accumulate_logprob_grad(policy, world, item.episode, contexts[t],
                              item.token_ids[t], cfg.temperature, weight, grads);
    }
  }

  double sft_total = 0.0;
  if (!sft_batch.empty()) {
    const double inv_items = 1.0 / static_cast<double>(sft_batch.size());
    for (const auto& item : sft_batch) {
      const auto contexts = build_contexts(world, item.token_ids, item.phases);
      const double w =
          -cfg.reward.gamma_sft * inv_items / static_cast<double>(item.token_ids.size());
      double seq = 0.0;
      for (size_t t = 0; t < item.token_ids.size(); ++t) {
        const auto ev = policy.eval_step(world, item.episode, contexts[t]);
        const auto probs = tempered_probs(ev, world.vocab().instruct, cfg.temperature);
        seq += std::log(probs[item.token_ids[t]]);
        accumulate_logprob_grad(policy, world, item.episode, contexts[t],
                                item.token_ids[t], cfg.temperature, w, grads);
      }
      sft_total += -seq / static_cast<double>(item.token_ids.size());
    }
  }

  if (loss_out) {
    loss_out->grpo = grpo_loss(ratios, advantages, cfg.clip_eps);
    loss_out->kl = ratios.empty() ? 0.0 : kl_sum / static_cast<double>(ratios.size());
    loss_out->sft =
        sft_batch.empty() ? 0.0 : sft_total / static_cast<double>(sft_batch.size());
    loss_out->total = loss_out->grpo + cfg.reward.gamma_sft * loss_out->sft +
                      cfg.kl_coeff * loss_out->kl;
  }
  return grads.flatten();
}

HybridLoss hybrid_step(ToyPolicy& policy, const PivotWorld& world,
                       const std::vector<GrpoItem>& batch,
                       const std::vector<SftItem>& sft_batch, const TrainConfig& cfg) {
  HybridLoss loss;
  const Eigen::VectorXd grad = hybrid_gradient(policy, world, batch, sft_batch, cfg, &loss);
  if (!grad.allFinite()) throw internal_error("hybrid_step: non-finite gradient");
  policy.unflatten(policy.flatten() - cfg.learning_rate * grad);
  return loss;
}

double pivot_window_share(std::span<const double> mid_share, int64_t pivot_step,
                          int64_t window) {
  const int64_t n = static_cast<int64_t>(mid_share.size());
  if (pivot_step < 0 || pivot_step >= n)
    throw input_error("pivot_window_share: pivot outside the series");
  const int64_t end = std::min<int64_t>(pivot_step + window, n);
  double sum = 0.0;
  for (int64_t t = pivot_step; t < end; ++t) sum += mid_share[static_cast<size_t>(t)];
  return sum / static_cast<double>(end - pivot_step);
}

namespace {

struct ScoredRollout {
  reward::RewardBreakdown breakdown;
  attention::AttentionProfile profile;
};

ScoredRollout score_rollout(const RolloutResult& rr, const std::string& ground_truth,
                            const TrainConfig& cfg) {
  ScoredRollout out;
  out.profile = attention::compute_profile(rr.trace, cfg.reward);
  const auto landscape = uncertainty::entropy_landscape(rr.trace);
  const auto mask = uncertainty::pivot_mask(landscape, cfg.reward.tau_ent);
  out.breakdown = reward::reward_total(rr.trace, out.profile, mask, ground_truth, cfg.reward);
  if (!cfg.visual_reward) {
    out.breakdown.r_local = 0.0;
    out.breakdown.r_global = 0.0;
    out.breakdown.local_steps.clear();
    out.breakdown.r_total =
        out.breakdown.r_outcome + 0.0 + out.breakdown.r_reflect;
  }
  return out;
}

nlohmann::json config_json(const TrainConfig& cfg) {
  nlohmann::json world{{"visual_slots", cfg.world.visual_slots},
                       {"answer_classes", cfg.world.answer_classes},
                       {"desc_tokens", cfg.world.desc_tokens},
                       {"desc_steps", cfg.world.desc_steps},
                       {"verify_steps", cfg.world.verify_steps},
                       {"reflect_verify_steps", cfg.world.reflect_verify_steps},
                       {"layers", cfg.world.layers}};
  nlohmann::json reward_j;
  to_json(reward_j, cfg.reward);
  return nlohmann::json{{"world", world},
                        {"reward", reward_j},
                        {"iterations", cfg.iterations},
                        {"group_size", cfg.group_size},
                        {"learning_rate", cfg.learning_rate},
                        {"clip_eps", cfg.clip_eps},
                        {"eps_adv", cfg.eps_adv},
                        {"kl_coeff", cfg.kl_coeff},
                        {"temperature", cfg.temperature},
                        {"visual_reward", cfg.visual_reward},
                        {"forced_reflection", cfg.forced_reflection},
                        {"seed", cfg.seed},
                        {"replay_capacity", cfg.replay_capacity},
                        {"sft_batch_cap", cfg.sft_batch_cap},
                        {"eval_episodes", cfg.eval_episodes}};
}

}  // namespace

double eval_u_score(const PivotWorld& world, const ToyPolicy& policy,
                    const RewardConfig& cfg, bool frm_enabled, int64_t episodes,
                    double temperature, Rng& rng) {
  double sum = 0.0;
  for (int64_t e = 0; e < episodes; ++e) {
    const auto episode = world.sample_episode(rng);
    auto rollouts = rollout_group(world, policy, 1, episode, cfg, frm_enabled,
                                  temperature, rng);
    const auto& trace = rollouts.front().trace;
    const auto profile = attention::compute_profile(trace, cfg);

    const int64_t pivot = world.pivot_step();
    int64_t reflect_pos = -1;
    for (int64_t t = pivot + 1; t < trace.steps; ++t) {
      if (cfg.reflection_markers.count(
              uncertainty::normalize_token(trace.tokens[static_cast<size_t>(t)].text))) {
        reflect_pos = t;
        break;
      }
    }
    if (reflect_pos < 0) continue;  // no marker, no recovery: scores 0

    attention::UScoreWindows windows;
    windows.pre = std::min<int64_t>(5, pivot + 1);
    windows.post = std::min<int64_t>(cfg.reflection_window, trace.steps - reflect_pos);
    const auto score =
        attention::u_score(profile.mid_share, pivot, reflect_pos, windows);
    sum += score.u_score_percent;
  }
  return episodes > 0 ? sum / static_cast<double>(episodes) : 0.0;
}

TrainOutcome train(const TrainConfig& cfg) {
  cfg.validate();
  PivotWorld world(cfg.world);
  ToyPolicy policy(cfg.world, world.vocab());
  policy.mid_layers = cfg.reward.effective_mid_layers(cfg.world.layers);

  Rng master(cfg.seed);
  reflect::ReplayBuffer buffer(cfg.replay_capacity);
  std::deque<SftItem> sft_store;

  TrainingReport report;
  report.seed = cfg.seed;
  report.config_snapshot = config_json(cfg).dump(2);

  for (int64_t iter = 0; iter < cfg.iterations; ++iter) {
    Rng iter_rng = master.fork();
    const auto episode = world.sample_episode(iter_rng);
    auto rollouts = rollout_group(world, policy, cfg.group_size, episode, cfg.reward,
                                  cfg.forced_reflection, cfg.temperature, iter_rng);

    IterationStats stats;
    std::vector<double> rewards;
    std::vector<GrpoItem> batch;
    for (size_t g = 0; g < rollouts.size(); ++g) {
      auto& rr = rollouts[g];
      const std::string tag = "it" + std::to_string(iter) + "-g" + std::to_string(g);
      rr.trace.trace_id = tag;
      rr.edit.id = tag;

      const auto scored = score_rollout(rr, episode.ground_truth, cfg);
      rewards.push_back(scored.breakdown.r_total);
      stats.mean_r_total += scored.breakdown.r_total;
      stats.mean_r_outcome += scored.breakdown.r_outcome;
      stats.mean_r_local += scored.breakdown.r_local;
      stats.mean_r_global += scored.breakdown.r_global;
      stats.mean_r_reflect += scored.breakdown.r_reflect;
      stats.accuracy += scored.breakdown.r_outcome >= 0.999 ? 1.0 : 0.0;
      stats.pivot_window_mid_share += pivot_window_share(
          scored.profile.mid_share, world.pivot_step(), cfg.reward.reflection_window);

      // Correctness-preserving replay admission.
      reflect::EditedTrajectory edit = rr.edit;
      edit.ground_truth = episode.ground_truth;
      std::string answer;
      for (int64_t i = edit.answer_span.begin; i < edit.answer_span.end; ++i) {
        if (!answer.empty()) answer += ' ';
        answer += edit.train_tokens[static_cast<size_t>(i)].text;
      }
      edit.match_score =
          reward::match_answer(answer, episode.ground_truth, cfg.reward).score;
      if (buffer.admit(std::move(edit), cfg.reward.tau_buf)) {
        std::vector<int64_t> ids;
        for (const auto& tok : rr.edit.train_tokens) ids.push_back(tok.id);
        sft_store.push_back({episode, std::move(ids), rr.phases});
        while (sft_store.size() > buffer.capacity()) sft_store.pop_front();
      }

      GrpoItem item;
      item.episode = episode;
      for (const auto& tok : rr.edit.train_tokens) item.token_ids.push_back(tok.id);
      item.phases = rr.phases;
      item.old_logprobs = rr.logprobs;
      batch.push_back(std::move(item));
    }

    const auto advantages = group_advantages(rewards, cfg.eps_adv);
    for (size_t g = 0; g < batch.size(); ++g) batch[g].advantage = advantages[g];

    std::vector<SftItem> sft_batch;
    const int64_t take =
        std::min<int64_t>(cfg.sft_batch_cap, static_cast<int64_t>(sft_store.size()));
    for (int64_t i = static_cast<int64_t>(sft_store.size()) - take;
         i < static_cast<int64_t>(sft_store.size()); ++i)
      sft_batch.push_back(sft_store[static_cast<size_t>(i)]);

    const auto loss = hybrid_step(policy, world, batch, sft_batch, cfg);

    const double inv_g = 1.0 / static_cast<double>(rollouts.size());
    stats.mean_r_total *= inv_g;
    stats.mean_r_outcome *= inv_g;
    stats.mean_r_local *= inv_g;
    stats.mean_r_global *= inv_g;
    stats.mean_r_reflect *= inv_g;
    stats.accuracy *= inv_g;
    stats.pivot_window_mid_share *= inv_g;
    stats.loss_grpo = loss.grpo;
    stats.loss_sft = loss.sft;
    stats.replay_size = static_cast<int64_t>(buffer.size());
    report.iterations.push_back(stats);
  }

  // Held-out evaluation at the final parameters.
  Rng eval_rng = master.fork();
  double acc = 0.0;
  double share = 0.0;
  for (int64_t e = 0; e < cfg.eval_episodes; ++e) {
    const auto episode = world.sample_episode(eval_rng);
    auto rollouts = rollout_group(world, policy, 1, episode, cfg.reward,
                                  cfg.forced_reflection, cfg.temperature, eval_rng);
    const auto scored = score_rollout(rollouts.front(), episode.ground_truth, cfg);
    acc += scored.breakdown.r_outcome >= 0.999 ? 1.0 : 0.0;
    share += pivot_window_share(scored.profile.mid_share, world.pivot_step(),
                                cfg.reward.reflection_window);
  }
  if (cfg.eval_episodes > 0) {
    report.final_accuracy = acc / static_cast<double>(cfg.eval_episodes);
    report.final_pivot_window_mid_share = share / static_cast<double>(cfg.eval_episodes);
  }
  Rng u_rng = master.fork();
  report.final_mean_u_score =
      eval_u_score(world, policy, cfg.reward, cfg.forced_reflection, cfg.eval_episodes,
                   cfg.temperature, u_rng);

  return TrainOutcome{std::move(report), std::move(policy), std::move(world),
                      std::move(buffer)};
}

}  // namespace tracekit::toy
