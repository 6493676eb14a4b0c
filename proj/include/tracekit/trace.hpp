#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tracekit {

struct Token {
  std::string text;
  int64_t id = 0;

  bool operator==(const Token&) const = default;
};

// Half-open index range [begin, end).
struct Span {
  int64_t begin = 0;
  int64_t end = 0;

  int64_t size() const { return end - begin; }
  bool contains(int64_t i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

enum class AttentionLayout { kFull, kHeadAvg };

const char* to_string(AttentionLayout layout);
AttentionLayout layout_from_string(const std::string& s);

// One recorded autoregressive generation. Tensors are flat row-major
// float32 buffers; empty vector == tensor absent. Layers are 1-based in
// every public API (layer_index_base is fixed to 1 in the container).
// Traces are immutable after load; concurrent reads are safe.
//
// Attention covers only the visual-region columns: raw row slices, not
// renormalized over the region. A FULL layout stores T*L*H*V, HEADAVG
// stores the head-averaged T*L*V content.
struct GenerationTrace {
  std::string trace_id;
  std::vector<Token> tokens;  // length T, the generated tokens

  int64_t steps = 0;          // T
  int64_t layers = 0;         // L
  int64_t heads = 0;          // H
  int64_t visual_tokens = 0;  // V
  int64_t vocab = 0;
  int64_t hidden_dim = 0;     // d; 0 when hidden_states absent

  Span visual_region;  // position of the visual tokens within the input
  Span answer_span;    // final-answer tokens within [0, T)

  AttentionLayout layout = AttentionLayout::kHeadAvg;

  std::vector<float> step_distributions;  // T x vocab
  std::vector<float> step_entropy;        // T
  std::vector<float> attention;           // T x L x H x V or T x L x V
  std::vector<float> hidden_states;       // T x L x d
  std::vector<float> unembedding;         // vocab x d

  bool frm_triggered = false;
  std::optional<int64_t> frm_trigger_pos;

  bool has_distributions() const { return !step_distributions.empty(); }
  bool has_entropy() const { return !step_entropy.empty(); }
  bool has_attention() const { return !attention.empty(); }
  bool has_hidden_states() const { return !hidden_states.empty(); }
  bool has_unembedding() const { return !unembedding.empty(); }

  const float* dist_row(int64_t t) const { return step_distributions.data() + t * vocab; }

  // layer is 1-based; head is 0-based; j indexes the visual column.
  float attn_full(int64_t t, int layer, int64_t head, int64_t j) const {
    return attention[((t * layers + (layer - 1)) * heads + head) * visual_tokens + j];
  }
  float attn_headavg(int64_t t, int layer, int64_t j) const {
    return attention[(t * layers + (layer - 1)) * visual_tokens + j];
  }

  const float* hidden_row(int64_t t, int layer) const {
    return hidden_states.data() + (t * layers + (layer - 1)) * hidden_dim;
  }

  // Tokens over answer_span joined with single spaces.
  std::string answer_text() const;
};

struct ValidationIssue {
  std::string code;     // stable machine-readable id, e.g. "dist_row_sum"
  std::string message;  // human-readable, carries coordinates
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
  std::string to_string() const;
};

// Checks every container invariant; the report is the diagnostic output.
ValidationReport validate_trace(const GenerationTrace& trace);

// Directory container: manifest.json plus one raw little-endian float32
// file per tensor. Loading is lossless (float bits preserved) and throws
// input_error on missing files, byte-length mismatches, malformed
// manifests, NaN/Inf (reported with tensor name and offset), or any
// violated trace invariant.
GenerationTrace load_trace(const std::filesystem::path& dir);
void write_trace(const GenerationTrace& trace, const std::filesystem::path& dir);

}  // namespace tracekit
