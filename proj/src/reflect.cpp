#include "tracekit/reflect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fsio.hpp"
#include "tracekit/errors.hpp"
#include "tracekit/reward.hpp"
#include "tracekit/uncertainty.hpp"

namespace tracekit::reflect {

TriggerDecision maybe_trigger(const std::vector<Token>& y1,
                              const std::set<std::string>& lexicon, double q, Rng& rng) {
  if (q < 0.0 || q > 1.0) throw input_error("maybe_trigger: q must be in [0, 1]");
  const auto anchors = uncertainty::transition_anchors(y1, lexicon);
  if (anchors.empty()) return {};  // probability exactly 0 without an anchor
  TriggerDecision out;
  out.triggered = rng.bernoulli(q);
  if (out.triggered) out.anchor_pos = anchors.front();
  return out;
}

std::vector<Token> tokenize_instruction(std::string_view instruction_text) {
  std::vector<Token> out;
  std::istringstream is{std::string(instruction_text)};
  std::string w;
  while (is >> w) out.push_back({w, -1});
  return out;
}

SpliceResult splice(const std::vector<Token>& y1, const std::vector<Token>& instruction) {
  if (instruction.empty()) throw input_error("splice: empty instruction");
  SpliceResult out;
  out.prompt = y1;
  out.prompt.insert(out.prompt.end(), instruction.begin(), instruction.end());
  out.instruction_span = {static_cast<int64_t>(y1.size()),
                          static_cast<int64_t>(y1.size() + instruction.size())};
  return out;
}

std::vector<Token> excise(const std::vector<Token>& y_prime, Span instruction_span) {
  const int64_t n = static_cast<int64_t>(y_prime.size());
  if (instruction_span.begin < 0 || instruction_span.end < instruction_span.begin ||
      instruction_span.end > n)
    throw input_error("excise: instruction span [" +
                      std::to_string(instruction_span.begin) + ", " +
                      std::to_string(instruction_span.end) + ") outside sequence of " +
                      std::to_string(n));
  std::vector<Token> out;
  out.reserve(static_cast<size_t>(n - instruction_span.size()));
  out.insert(out.end(), y_prime.begin(), y_prime.begin() + instruction_span.begin);
  out.insert(out.end(), y_prime.begin() + instruction_span.end, y_prime.end());
  return out;
}

EditedTrajectory edit_trajectory(std::string id, const std::vector<Token>& y1,
                                 Span y1_answer_span, const Generator& generate,
                                 const RewardConfig& cfg, Rng& rng) {
  EditedTrajectory out;
  out.id = std::move(id);
  out.initial = y1;

  const auto decision = maybe_trigger(y1, cfg.transition_lexicon, cfg.trigger_prob, rng);
  out.triggered = decision.triggered;
  out.anchor_pos = decision.anchor_pos;

  if (!out.triggered) {
    out.train_tokens = y1;
    out.answer_span = y1_answer_span;
    return out;
  }

  const auto instruction = tokenize_instruction(cfg.instruction_text);
  const auto spliced = splice(y1, instruction);
  out.instruction_span = spliced.instruction_span;

  Continuation cont = generate(spliced.prompt);
  out.continuation = cont.tokens;

  std::vector<Token> y_prime = spliced.prompt;
  y_prime.insert(y_prime.end(), cont.tokens.begin(), cont.tokens.end());
  out.train_tokens = excise(y_prime, spliced.instruction_span);

  if (cont.answer_span) {
    out.answer_span = {static_cast<int64_t>(y1.size()) + cont.answer_span->begin,
                       static_cast<int64_t>(y1.size()) + cont.answer_span->end};
  } else {
    out.answer_span = y1_answer_span;
  }
  return out;
}

double sft_loss(std::span<const double> token_logprobs) {
  if (token_logprobs.empty()) throw input_error("sft_loss: empty sequence");
  double sum = 0.0;
  for (size_t i = 0; i < token_logprobs.size(); ++i) {
    const double lp = token_logprobs[i];
    if (!std::isfinite(lp) || lp > 0.0)
      throw input_error("sft_loss: log-probability at position " + std::to_string(i) +
                        " is " + std::to_string(lp));
    sum += lp;
  }
  return -sum / static_cast<double>(token_logprobs.size());
}

bool ReplayBuffer::admit(EditedTrajectory record, double tau_buf) {
  const bool keep = record.match_score >= tau_buf;
  log_.push_back({record.id, record.match_score, keep});
  if (keep) {
    records_.push_back(std::move(record));
    if (records_.size() > capacity_) records_.erase(records_.begin());
  }
  return keep;
}

ReplayBuffer filter_replay(const std::vector<EditedTrajectory>& candidates,
                           std::string_view ground_truth, const RewardConfig& cfg) {
  ReplayBuffer buffer;
  for (const auto& candidate : candidates) {
    EditedTrajectory scored = candidate;
    std::string answer;
    for (int64_t i = scored.answer_span.begin; i < scored.answer_span.end; ++i) {
      if (!answer.empty()) answer += ' ';
      answer += scored.train_tokens[static_cast<size_t>(i)].text;
    }
    scored.ground_truth = std::string(ground_truth);
    scored.match_score = reward::match_answer(answer, ground_truth, cfg).score;
    buffer.admit(std::move(scored), cfg.tau_buf);
  }
  return buffer;
}

namespace {

nlohmann::json tokens_json(const std::vector<Token>& tokens) {
  auto arr = nlohmann::json::array();
  for (const auto& t : tokens) arr.push_back({{"text", t.text}, {"id", t.id}});
  return arr;
}

std::vector<Token> tokens_from_json(const nlohmann::json& arr) {
  std::vector<Token> out;
  for (const auto& t : arr)
    out.push_back({t.at("text").get<std::string>(), t.at("id").get<int64_t>()});
  return out;
}

}  // namespace

void write_buffer_jsonl(const ReplayBuffer& buffer, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : buffer.records()) {
    nlohmann::json j;
    j["id"] = r.id;
    j["triggered"] = r.triggered;
    if (r.anchor_pos) j["anchor_pos"] = *r.anchor_pos;
    j["instruction_span"] = {r.instruction_span.begin, r.instruction_span.end};
    j["answer_span"] = {r.answer_span.begin, r.answer_span.end};
    j["ground_truth"] = r.ground_truth;
    j["match_score"] = r.match_score;
    j["initial"] = tokens_json(r.initial);
    j["continuation"] = tokens_json(r.continuation);
    j["train_tokens"] = tokens_json(r.train_tokens);
    out += j.dump();
    out += '\n';
  }
  fsio::write_atomic(path, out);
}

std::vector<EditedTrajectory> load_buffer_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open replay buffer: " + path.string());
  std::vector<EditedTrajectory> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      EditedTrajectory r;
      r.id = j.at("id").get<std::string>();
      r.triggered = j.at("triggered").get<bool>();
      if (j.contains("anchor_pos")) r.anchor_pos = j.at("anchor_pos").get<int64_t>();
      r.instruction_span = {j.at("instruction_span").at(0).get<int64_t>(),
                            j.at("instruction_span").at(1).get<int64_t>()};
      r.answer_span = {j.at("answer_span").at(0).get<int64_t>(),
                       j.at("answer_span").at(1).get<int64_t>()};
      r.ground_truth = j.at("ground_truth").get<std::string>();
      r.match_score = j.at("match_score").get<double>();
      r.initial = tokens_from_json(j.at("initial"));
      r.continuation = tokens_from_json(j.at("continuation"));
      r.train_tokens = tokens_from_json(j.at("train_tokens"));
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw input_error("replay buffer " + path.string() + " line " +
                        std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tracekit::reflect
