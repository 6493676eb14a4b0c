#include "tracekit/trace.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fsio.hpp"
#include "tracekit/errors.hpp"

namespace tracekit {

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kFormatTag = "tracekit-trace/1";

struct TensorDecl {
  const char* name;
  const std::vector<float>* data;
  int64_t expected_elements;
};

int64_t attention_elements(const GenerationTrace& t) {
  return t.layout == AttentionLayout::kFull
             ? t.steps * t.layers * t.heads * t.visual_tokens
             : t.steps * t.layers * t.visual_tokens;
}

std::vector<TensorDecl> tensor_table(const GenerationTrace& t) {
  std::vector<TensorDecl> out;
  if (t.has_distributions())
    out.push_back({"step_distributions", &t.step_distributions, t.steps * t.vocab});
  if (t.has_entropy()) out.push_back({"step_entropy", &t.step_entropy, t.steps});
  if (t.has_attention()) out.push_back({"attention", &t.attention, attention_elements(t)});
  if (t.has_hidden_states())
    out.push_back({"hidden_states", &t.hidden_states, t.steps * t.layers * t.hidden_dim});
  if (t.has_unembedding())
    out.push_back({"unembedding", &t.unembedding, t.vocab * t.hidden_dim});
  return out;
}

void check_finite(const std::vector<float>& data, const std::string& tensor_name) {
  for (size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i]))
      throw input_error("tensor '" + tensor_name + "' holds a non-finite value at offset " +
                        std::to_string(i));
  }
}

}  // namespace

const char* to_string(AttentionLayout layout) {
  return layout == AttentionLayout::kFull ? "FULL" : "HEADAVG";
}

AttentionLayout layout_from_string(const std::string& s) {
  if (s == "FULL") return AttentionLayout::kFull;
  if (s == "HEADAVG") return AttentionLayout::kHeadAvg;
  throw input_error("unknown attention layout '" + s + "' (expected FULL or HEADAVG)");
}

std::string GenerationTrace::answer_text() const {
  std::string out;
  for (int64_t i = answer_span.begin; i < answer_span.end; ++i) {
    if (!out.empty()) out += ' ';
    out += tokens[static_cast<size_t>(i)].text;
  }
  return out;
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (const auto& issue : issues) os << issue.code << ": " << issue.message << "\n";
  return os.str();
}

ValidationReport validate_trace(const GenerationTrace& t) {
  ValidationReport report;
  auto add = [&report](std::string code, std::string message) {
    report.issues.push_back({std::move(code), std::move(message)});
  };

  if (t.steps < 1) add("dims", "step count T must be >= 1");
  if (t.layers < 1) add("dims", "layer count L must be >= 1");
  if (t.heads < 1) add("dims", "head count H must be >= 1");
  if (t.visual_tokens < 1) add("dims", "visual token count V must be >= 1");
  if (t.vocab < 1) add("dims", "vocabulary size must be >= 1");
  if (!report.issues.empty()) return report;  // coordinates below assume sane dims

  if (static_cast<int64_t>(t.tokens.size()) != t.steps)
    add("tokens", "token list length " + std::to_string(t.tokens.size()) +
                      " does not match T=" + std::to_string(t.steps));

  if (!t.has_distributions() && !t.has_entropy())
    add("entropy_source",
        "neither step_distributions nor step_entropy present; entropy ops will fail");

  for (const auto& decl : tensor_table(t)) {
    if (static_cast<int64_t>(decl.data->size()) != decl.expected_elements)
      add("tensor_size", std::string("tensor '") + decl.name + "' holds " +
                             std::to_string(decl.data->size()) + " elements, expected " +
                             std::to_string(decl.expected_elements));
    for (size_t i = 0; i < decl.data->size(); ++i) {
      if (!std::isfinite((*decl.data)[i])) {
        add("non_finite", std::string("tensor '") + decl.name +
                              "' holds a non-finite value at offset " + std::to_string(i));
        break;
      }
    }
  }
  if ((t.has_hidden_states() || t.has_unembedding()) && t.hidden_dim < 1)
    add("dims", "hidden_dim must be >= 1 when hidden_states/unembedding present");

  if (t.has_distributions() &&
      static_cast<int64_t>(t.step_distributions.size()) == t.steps * t.vocab) {
    for (int64_t s = 0; s < t.steps; ++s) {
      const float* row = t.dist_row(s);
      double sum = 0.0;
      bool negative = false;
      int64_t neg_at = -1;
      for (int64_t v = 0; v < t.vocab; ++v) {
        if (row[v] < 0.0f && !negative) {
          negative = true;
          neg_at = v;
        }
        sum += static_cast<double>(row[v]);
      }
      if (negative)
        add("dist_negative", "negative probability at step " + std::to_string(s) +
                                 ", vocab index " + std::to_string(neg_at));
      if (std::fabs(sum - 1.0) > 1e-6)
        add("dist_row_sum", "distribution row at step " + std::to_string(s) + " sums to " +
                                std::to_string(sum));
    }
  }

  if (t.has_attention() &&
      static_cast<int64_t>(t.attention.size()) == attention_elements(t)) {
    const int64_t heads = t.layout == AttentionLayout::kFull ? t.heads : 1;
    for (size_t i = 0; i < t.attention.size(); ++i) {
      const float a = t.attention[i];
      if (a < 0.0f || a > 1.0f) {
        const int64_t j = static_cast<int64_t>(i) % t.visual_tokens;
        int64_t rest = static_cast<int64_t>(i) / t.visual_tokens;
        const int64_t h = rest % heads;
        rest /= heads;
        const int64_t l = rest % t.layers;
        const int64_t step = rest / t.layers;
        std::string coords = "(t=" + std::to_string(step) + ", l=" + std::to_string(l + 1);
        if (t.layout == AttentionLayout::kFull) coords += ", h=" + std::to_string(h);
        coords += ", j=" + std::to_string(j) + ")";
        add("attention_range",
            "attention value " + std::to_string(a) + " outside [0, 1] at " + coords);
        break;
      }
    }
  }

  if (t.visual_region.size() != t.visual_tokens)
    add("visual_region", "visual_region length " + std::to_string(t.visual_region.size()) +
                             " does not equal V=" + std::to_string(t.visual_tokens));
  if (t.answer_span.begin < 0 || t.answer_span.end < t.answer_span.begin ||
      t.answer_span.end > t.steps)
    add("answer_span", "answer_span [" + std::to_string(t.answer_span.begin) + ", " +
                           std::to_string(t.answer_span.end) + ") not within [0, " +
                           std::to_string(t.steps) + ")");
  if (t.frm_trigger_pos && (*t.frm_trigger_pos < 0 || *t.frm_trigger_pos >= t.steps))
    add("frm_trigger_pos", "frm_trigger_pos " + std::to_string(*t.frm_trigger_pos) +
                               " outside [0, " + std::to_string(t.steps) + ")");
  return report;
}

void write_trace(const GenerationTrace& t, const std::filesystem::path& dir) {
  auto report = validate_trace(t);
  if (!report.ok())
    throw input_error("refusing to write invalid trace:\n" + report.to_string());

  std::filesystem::create_directories(dir);

  nlohmann::json manifest;
  manifest["format"] = kFormatTag;
  manifest["trace_id"] = t.trace_id;
  manifest["T"] = t.steps;
  manifest["L"] = t.layers;
  manifest["H"] = t.heads;
  manifest["V"] = t.visual_tokens;
  manifest["vocab"] = t.vocab;
  if (t.hidden_dim > 0) manifest["d"] = t.hidden_dim;
  manifest["layout"] = to_string(t.layout);
  manifest["layer_index_base"] = 1;
  manifest["visual_region"] = {t.visual_region.begin, t.visual_region.end};
  manifest["answer_span"] = {t.answer_span.begin, t.answer_span.end};
  manifest["frm_triggered"] = t.frm_triggered;
  if (t.frm_trigger_pos) manifest["frm_trigger_pos"] = *t.frm_trigger_pos;
  auto& tokens = manifest["tokens"] = nlohmann::json::array();
  for (const auto& tok : t.tokens) tokens.push_back({{"text", tok.text}, {"id", tok.id}});

  auto& tensors = manifest["tensors"] = nlohmann::json::object();
  for (const auto& decl : tensor_table(t)) {
    const std::string file = std::string(decl.name) + ".f32";
    tensors[decl.name] = {{"file", file}, {"elements", decl.expected_elements}};
    fsio::write_f32(dir / file, *decl.data);
  }
  fsio::write_atomic(dir / kManifestName, manifest.dump(2) + "\n");
}

GenerationTrace load_trace(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  if (!std::filesystem::exists(manifest_path))
    throw input_error("missing manifest: " + manifest_path.string());

  nlohmann::json m;
  try {
    m = nlohmann::json::parse(fsio::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw input_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  GenerationTrace t;
  try {
    if (m.value("format", std::string(kFormatTag)) != kFormatTag)
      throw input_error("unsupported container format '" +
                        m.value("format", std::string()) + "'");
    t.trace_id = m.at("trace_id").get<std::string>();
    t.steps = m.at("T").get<int64_t>();
    t.layers = m.at("L").get<int64_t>();
    t.heads = m.at("H").get<int64_t>();
    t.visual_tokens = m.at("V").get<int64_t>();
    t.vocab = m.at("vocab").get<int64_t>();
    t.hidden_dim = m.value("d", int64_t{0});
    t.layout = layout_from_string(m.at("layout").get<std::string>());
    if (m.value("layer_index_base", int64_t{1}) != 1)
      throw input_error("layer_index_base must be 1");
    t.visual_region = {m.at("visual_region").at(0).get<int64_t>(),
                       m.at("visual_region").at(1).get<int64_t>()};
    t.answer_span = {m.at("answer_span").at(0).get<int64_t>(),
                     m.at("answer_span").at(1).get<int64_t>()};
    t.frm_triggered = m.value("frm_triggered", false);
    if (m.contains("frm_trigger_pos") && !m.at("frm_trigger_pos").is_null())
      t.frm_trigger_pos = m.at("frm_trigger_pos").get<int64_t>();
    for (const auto& tok : m.at("tokens"))
      t.tokens.push_back({tok.at("text").get<std::string>(), tok.at("id").get<int64_t>()});

    const auto& tensors = m.at("tensors");
    auto read_tensor = [&](const char* name, std::vector<float>& out,
                           int64_t expected_elements) {
      if (!tensors.contains(name)) return;
      const auto& decl = tensors.at(name);
      const auto file = dir / decl.at("file").get<std::string>();
      const int64_t declared = decl.at("elements").get<int64_t>();
      if (declared != expected_elements)
        throw input_error(std::string("tensor '") + name + "' declares " +
                          std::to_string(declared) + " elements but dimensions imply " +
                          std::to_string(expected_elements));
      if (!std::filesystem::exists(file))
        throw input_error(std::string("missing tensor file for '") + name +
                          "': " + file.string());
      out = fsio::read_f32(file);
      if (static_cast<int64_t>(out.size()) != declared)
        throw input_error(std::string("tensor '") + name + "' file holds " +
                          std::to_string(out.size()) + " elements, manifest declares " +
                          std::to_string(declared));
      check_finite(out, name);
    };

    read_tensor("step_distributions", t.step_distributions, t.steps * t.vocab);
    read_tensor("step_entropy", t.step_entropy, t.steps);
    read_tensor("attention", t.attention, attention_elements(t));
    read_tensor("hidden_states", t.hidden_states, t.steps * t.layers * t.hidden_dim);
    read_tensor("unembedding", t.unembedding, t.vocab * t.hidden_dim);
  } catch (const nlohmann::json::exception& e) {
    throw input_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  auto report = validate_trace(t);
  if (!report.ok())
    throw input_error("trace at " + dir.string() + " violates invariants:\n" +
                      report.to_string());
  return t;
}

}  // namespace tracekit
