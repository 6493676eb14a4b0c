#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tracekit/config.hpp"
#include "tracekit/rng.hpp"
#include "tracekit/trace.hpp"

namespace tracekit::reflect {

struct TriggerDecision {
  bool triggered = false;
  std::optional<int64_t> anchor_pos;  // first transition token when triggered
};

// Triggers with probability q when a transition token is present in y1,
// never otherwise. One uniform draw is consumed iff an anchor exists.
TriggerDecision maybe_trigger(const std::vector<Token>& y1,
                              const std::set<std::string>& lexicon, double q, Rng& rng);

// Whitespace-split instruction_text; instruction tokens carry id -1.
std::vector<Token> tokenize_instruction(std::string_view instruction_text);

struct SpliceResult {
  std::vector<Token> prompt;  // y1 + instruction
  Span instruction_span;      // within prompt
};

// Appends the instruction after y1 and records its span. The caller's
// generator produces the continuation from this prompt.
SpliceResult splice(const std::vector<Token>& y1, const std::vector<Token>& instruction);

// Removes the recorded instruction span: y1 + instruction + y2 -> y1 + y2.
// Naturally generated markers inside y2 are untouched.
std::vector<Token> excise(const std::vector<Token>& y_prime, Span instruction_span);

struct Continuation {
  std::vector<Token> tokens;
  std::vector<double> logprobs;        // one per token, <= 0
  std::optional<Span> answer_span;     // within tokens, when it finalizes an answer
};

// Contract for the continuation generator: prompt tokens in, continuation
// out. The toy policy and recorded data both plug in here.
using Generator = std::function<Continuation(const std::vector<Token>& prompt)>;

struct EditedTrajectory {
  std::string id;
  std::vector<Token> initial;  // y1
  bool triggered = false;
  std::optional<int64_t> anchor_pos;
  Span instruction_span;            // within y1+instruction+y2; empty if untriggered
  std::vector<Token> continuation;  // y2
  std::vector<Token> train_tokens;  // y1 + y2 (or y1 when untriggered)
  Span answer_span;                 // within train_tokens
  std::string ground_truth;
  double match_score = 0.0;
};

// Full edit pipeline: trigger decision, splice, generation, excision.
// answer_span defaults to y1's span and is replaced by the continuation's
// when it finalizes a new answer.
EditedTrajectory edit_trajectory(std::string id, const std::vector<Token>& y1,
                                 Span y1_answer_span, const Generator& generate,
                                 const RewardConfig& cfg, Rng& rng);

// Negative mean log-probability over the training sequence. Throws on an
// empty sequence or a positive log-probability.
double sft_loss(std::span<const double> token_logprobs);

struct Admission {
  std::string id;
  double score = 0.0;
  bool kept = false;
};

// Single writer, many readers: admit() is the serialization point; the
// accessors hand out const views only.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity = 4096) : capacity_(capacity) {}

  // Admits iff score >= tau_buf; evicts the oldest record past capacity.
  bool admit(EditedTrajectory record, double tau_buf);

  const std::vector<EditedTrajectory>& records() const { return records_; }
  const std::vector<Admission>& admission_log() const { return log_; }
  size_t capacity() const { return capacity_; }
  size_t size() const { return records_.size(); }

 private:
  size_t capacity_;
  std::vector<EditedTrajectory> records_;
  std::vector<Admission> log_;
};

// Scores every candidate's final answer against gt and retains those with
// match >= tau_buf (first-attempt-correct and corrected-after-reflection
// alike).
ReplayBuffer filter_replay(const std::vector<EditedTrajectory>& candidates,
                           std::string_view ground_truth, const RewardConfig& cfg);

// One JSON record per line, admission order.
void write_buffer_jsonl(const ReplayBuffer& buffer, const std::filesystem::path& path);
std::vector<EditedTrajectory> load_buffer_jsonl(const std::filesystem::path& path);

}  // namespace tracekit::reflect
