#include "tracekit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "tracekit/errors.hpp"
#include "tracekit/rng.hpp"

namespace tracekit {

namespace {

// Entropy of the two-mass family: one main token at 1-x, the rest sharing
// x uniformly. Monotone in x up to the uniform point, so a target entropy
// in [0, log vocab) is hit by bisection.
double family_entropy(double x, int64_t vocab) {
  const double tail = static_cast<double>(vocab - 1);
  double h = 0.0;
  if (x < 1.0 && x > 0.0) {
    h -= (1.0 - x) * std::log(1.0 - x);
    h -= x * std::log(x / tail);
  } else if (x == 0.0) {
    h = 0.0;
  } else {  // x == 1, mass uniform over the tail
    h = std::log(tail);
  }
  return h;
}

double solve_tail_mass(double target_entropy, int64_t vocab) {
  if (target_entropy <= 0.0) return 0.0;
  double lo = 0.0;
  double hi = static_cast<double>(vocab - 1) / static_cast<double>(vocab);  // uniform
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (family_entropy(mid, vocab) < target_entropy)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<std::string> split_whitespace(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

GenerationTrace synth_trace(const SynthSpec& spec) {
  const int64_t T = spec.steps;
  if (T < 1 || spec.layers < 1 || spec.heads < 1 || spec.visual_tokens < 1 ||
      spec.vocab < 2)
    throw input_error("synth: dimensions must be positive (vocab >= 2)");
  for (double level : {spec.attn_pre, spec.attn_dip, spec.attn_recovery})
    if (level < 0.0 || level > 1.0)
      throw input_error("synth: attention profile levels must lie in [0, 1]");
  if (!(spec.entropy_spike > spec.entropy_baseline))
    throw input_error("synth: spike entropy must exceed baseline entropy");
  const double max_entropy = std::log(static_cast<double>(spec.vocab));
  if (spec.entropy_spike >= max_entropy || spec.entropy_baseline < 0.0)
    throw input_error("synth: entropies must lie in [0, log vocab)");

  const auto answer_words = split_whitespace(spec.answer);
  const int64_t answer_len = static_cast<int64_t>(answer_words.size());
  if (answer_len >= T) throw input_error("synth: answer longer than the trace");
  const int64_t answer_begin = T - answer_len;

  for (int64_t p : spec.pivot_positions)
    if (p < 0 || p >= answer_begin)
      throw input_error("synth: pivot position " + std::to_string(p) +
                        " outside the reasoning span [0, " + std::to_string(answer_begin) +
                        ")");
  for (int64_t r : spec.reflection_positions) {
    if (r < 0 || r >= answer_begin)
      throw input_error("synth: reflection position " + std::to_string(r) +
                        " outside the reasoning span");
    if (std::find(spec.pivot_positions.begin(), spec.pivot_positions.end(), r) !=
        spec.pivot_positions.end())
      throw input_error("synth: reflection position " + std::to_string(r) +
                        " collides with a pivot");
  }

  auto pivots = spec.pivot_positions;
  std::sort(pivots.begin(), pivots.end());
  auto reflections = spec.reflection_positions;
  std::sort(reflections.begin(), reflections.end());

  static const char* kFiller[] = {"the", "scene", "shows", "a", "region", "with",
                                  "steady", "detail", "near", "its", "center"};
  constexpr size_t kFillerCount = sizeof(kFiller) / sizeof(kFiller[0]);

  Rng rng(spec.seed);
  GenerationTrace t;
  t.trace_id = "synth-" + std::to_string(spec.seed);
  t.steps = T;
  t.layers = spec.layers;
  t.heads = spec.heads;
  t.visual_tokens = spec.visual_tokens;
  t.vocab = spec.vocab;
  t.layout = spec.layout;
  t.visual_region = {0, spec.visual_tokens};
  t.answer_span = {answer_begin, T};
  t.frm_triggered = !reflections.empty();
  if (t.frm_triggered)
    t.frm_trigger_pos = pivots.empty() ? reflections.front() : pivots.front();

  // Surface forms; ids assigned by first occurrence.
  std::map<std::string, int64_t> ids;
  auto id_of = [&](const std::string& word) {
    auto it = ids.find(word);
    if (it != ids.end()) return it->second;
    const int64_t id = static_cast<int64_t>(ids.size());
    if (id >= spec.vocab)
      throw input_error("synth: vocabulary too small for the distinct surface forms");
    ids.emplace(word, id);
    return id;
  };

  t.tokens.resize(static_cast<size_t>(T));
  for (int64_t s = 0; s < T; ++s) {
    std::string word;
    if (std::binary_search(pivots.begin(), pivots.end(), s))
      word = "however";
    else if (std::binary_search(reflections.begin(), reflections.end(), s))
      word = "wait";
    else if (s >= answer_begin)
      word = answer_words[static_cast<size_t>(s - answer_begin)];
    else
      word = kFiller[rng.below(kFillerCount)];
    t.tokens[static_cast<size_t>(s)] = {word, id_of(word)};
  }

  // Distributions: main mass on the realized token, tail uniform, tail mass
  // solved so the step entropy hits baseline (spike at pivots).
  const double tail_base = solve_tail_mass(spec.entropy_baseline, spec.vocab);
  const double tail_spike = solve_tail_mass(spec.entropy_spike, spec.vocab);
  t.step_distributions.assign(static_cast<size_t>(T * spec.vocab), 0.0f);
  t.step_entropy.resize(static_cast<size_t>(T));
  for (int64_t s = 0; s < T; ++s) {
    const bool spike = std::binary_search(pivots.begin(), pivots.end(), s);
    const double x = spike ? tail_spike : tail_base;
    const int64_t main_id = t.tokens[static_cast<size_t>(s)].id;
    const float tail_p = static_cast<float>(x / static_cast<double>(spec.vocab - 1));
    float* row = t.step_distributions.data() + s * spec.vocab;
    for (int64_t v = 0; v < spec.vocab; ++v) row[v] = tail_p;
    row[main_id] = static_cast<float>(1.0 - x);

    double h = 0.0;
    for (int64_t v = 0; v < spec.vocab; ++v) {
      const double p = static_cast<double>(row[v]);
      if (p > 0.0) h -= p * std::log(p);
    }
    t.step_entropy[static_cast<size_t>(s)] = static_cast<float>(h);
  }

  // Attention: every head row sums to the profile level for the step.
  const int64_t first_pivot = pivots.empty() ? T : pivots.front();
  const int64_t recovery_from = reflections.empty() ? T : reflections.front();
  auto level_at = [&](int64_t s) {
    if (s <= first_pivot) return spec.attn_pre;
    if (s >= recovery_from) return spec.attn_recovery;
    return spec.attn_dip;
  };
  const int64_t head_cells = spec.layout == AttentionLayout::kFull ? spec.heads : 1;
  t.attention.resize(
      static_cast<size_t>(T * spec.layers * head_cells * spec.visual_tokens));
  size_t idx = 0;
  for (int64_t s = 0; s < T; ++s) {
    const float cell =
        static_cast<float>(level_at(s) / static_cast<double>(spec.visual_tokens));
    for (int64_t rest = 0; rest < spec.layers * head_cells * spec.visual_tokens; ++rest)
      t.attention[idx++] = cell;
  }

  auto report = validate_trace(t);
  if (!report.ok())
    throw internal_error("synth produced an invalid trace:\n" + report.to_string());
  return t;
}

}  // namespace tracekit
