#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tracekit/trace.hpp"

namespace tracekit {

// Deterministic fixture generator. Plants a spiky entropy landscape and a
// three-level visual-attention profile (pre-pivot / decoupling dip /
// recovery) so downstream metrics have known ground truth:
//   steps <= first pivot           -> attn_pre
//   after pivot, before recovery   -> attn_dip
//   from the first planted marker  -> attn_recovery
// Every head row at step t sums to the profile level, spread uniformly
// over the V visual columns.
struct SynthSpec {
  uint64_t seed = 0;
  int64_t steps = 32;         // T
  int64_t layers = 24;        // L
  int64_t heads = 2;          // H
  int64_t visual_tokens = 8;  // V
  int64_t vocab = 64;

  std::vector<int64_t> pivot_positions;

  double attn_pre = 0.40;
  double attn_dip = 0.05;
  double attn_recovery = 0.30;

  double entropy_baseline = 0.40;  // nats
  double entropy_spike = 1.40;     // nats, at pivot positions

  // Positions where a reflection marker token ("wait") is planted.
  std::vector<int64_t> reflection_positions;

  // Planted final answer; whitespace-split into the trailing tokens and
  // covered by answer_span.
  std::string answer = "42";

  AttentionLayout layout = AttentionLayout::kFull;
};

// Throws input_error on an inconsistent spec (pivot beyond T, spike not
// above baseline, profile levels outside [0, 1], ...). The emitted trace
// always passes validate_trace; frm_triggered is set when reflection
// markers are planted, with the first pivot (else first marker) recorded
// as the trigger position.
GenerationTrace synth_trace(const SynthSpec& spec);

}  // namespace tracekit
