#include "tracekit/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tracekit/errors.hpp"

namespace tracekit {

void RewardConfig::validate() const {
  if (!(tau_mid < tau_high)) throw input_error("config: tau_mid must be < tau_high");
  if (trigger_prob < 0.0 || trigger_prob > 1.0)
    throw input_error("config: trigger_prob must be in [0, 1]");
  if (kappa_min != 0 && kappa_min < 1)
    throw input_error("config: kappa_min must be >= 1 (or 0 for auto)");
  if (reflection_window < 1) throw input_error("config: reflection_window must be >= 1");
  if (!(lambda_reg > 0.0)) throw input_error("config: lambda_reg must be > 0");
  if (mid_layers.empty()) throw input_error("config: mid_layers must be nonempty");
  for (int l : mid_layers)
    if (l < 1) throw input_error("config: mid_layers entries must be >= 1");
  if (!all_layers.empty()) {
    for (int l : mid_layers) {
      if (std::find(all_layers.begin(), all_layers.end(), l) == all_layers.end())
        throw input_error("config: mid_layers must be a subset of all_layers");
    }
  }
  if (reflection_markers.empty())
    throw input_error("config: reflection_markers must be nonempty");
  if (transition_lexicon.empty())
    throw input_error("config: transition_lexicon must be nonempty");
}

int64_t RewardConfig::effective_kappa_min(int64_t visual_tokens) const {
  if (kappa_min != 0) return kappa_min;
  return std::max<int64_t>(
      1, static_cast<int64_t>(std::ceil(0.05 * static_cast<double>(visual_tokens))));
}

std::vector<int> RewardConfig::effective_mid_layers(int64_t layers) const {
  for (int l : mid_layers) {
    if (l < 1 || l > layers)
      throw input_error("config: mid layer " + std::to_string(l) +
                        " outside [1, " + std::to_string(layers) + "]");
  }
  return mid_layers;
}

std::vector<int> RewardConfig::effective_all_layers(int64_t layers) const {
  if (all_layers.empty()) {
    std::vector<int> out(static_cast<size_t>(layers));
    for (int64_t i = 0; i < layers; ++i) out[static_cast<size_t>(i)] = static_cast<int>(i + 1);
    return out;
  }
  for (int l : all_layers) {
    if (l < 1 || l > layers)
      throw input_error("config: layer " + std::to_string(l) + " outside [1, " +
                        std::to_string(layers) + "]");
  }
  return all_layers;
}

void to_json(nlohmann::json& j, const RewardConfig& cfg) {
  j = nlohmann::json{{"tau_ent", cfg.tau_ent},
                     {"tau_high", cfg.tau_high},
                     {"tau_mid", cfg.tau_mid},
                     {"gamma_attn", cfg.gamma_attn},
                     {"kappa_min", cfg.kappa_min},
                     {"w_global", cfg.w_global},
                     {"mu_target", cfg.mu_target},
                     {"mid_layers", cfg.mid_layers},
                     {"all_layers", cfg.all_layers},
                     {"reflection_window", cfg.reflection_window},
                     {"trigger_prob", cfg.trigger_prob},
                     {"tau_buf", cfg.tau_buf},
                     {"eps_abs", cfg.eps_abs},
                     {"eps_rel", cfg.eps_rel},
                     {"eps_0", cfg.eps_0},
                     {"lambda_reg", cfg.lambda_reg},
                     {"gamma_sft", cfg.gamma_sft},
                     {"reflection_markers", cfg.reflection_markers},
                     {"transition_lexicon", cfg.transition_lexicon},
                     {"instruction_text", cfg.instruction_text}};
}

void from_json(const nlohmann::json& j, RewardConfig& cfg) {
  static const std::set<std::string> known = {
      "tau_ent", "tau_high", "tau_mid", "gamma_attn", "kappa_min", "w_global",
      "mu_target", "mid_layers", "all_layers", "reflection_window", "trigger_prob",
      "tau_buf", "eps_abs", "eps_rel", "eps_0", "lambda_reg", "gamma_sft",
      "reflection_markers", "transition_lexicon", "instruction_text"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key()))
      throw input_error("config: unknown key '" + item.key() + "'");
  }
  cfg = RewardConfig{};
  if (j.contains("tau_ent")) j.at("tau_ent").get_to(cfg.tau_ent);
  if (j.contains("tau_high")) j.at("tau_high").get_to(cfg.tau_high);
  if (j.contains("tau_mid")) j.at("tau_mid").get_to(cfg.tau_mid);
  if (j.contains("gamma_attn")) j.at("gamma_attn").get_to(cfg.gamma_attn);
  if (j.contains("kappa_min")) j.at("kappa_min").get_to(cfg.kappa_min);
  if (j.contains("w_global")) j.at("w_global").get_to(cfg.w_global);
  if (j.contains("mu_target")) j.at("mu_target").get_to(cfg.mu_target);
  if (j.contains("mid_layers")) j.at("mid_layers").get_to(cfg.mid_layers);
  if (j.contains("all_layers")) j.at("all_layers").get_to(cfg.all_layers);
  if (j.contains("reflection_window")) j.at("reflection_window").get_to(cfg.reflection_window);
  if (j.contains("trigger_prob")) j.at("trigger_prob").get_to(cfg.trigger_prob);
  if (j.contains("tau_buf")) j.at("tau_buf").get_to(cfg.tau_buf);
  if (j.contains("eps_abs")) j.at("eps_abs").get_to(cfg.eps_abs);
  if (j.contains("eps_rel")) j.at("eps_rel").get_to(cfg.eps_rel);
  if (j.contains("eps_0")) j.at("eps_0").get_to(cfg.eps_0);
  if (j.contains("lambda_reg")) j.at("lambda_reg").get_to(cfg.lambda_reg);
  if (j.contains("gamma_sft")) j.at("gamma_sft").get_to(cfg.gamma_sft);
  if (j.contains("reflection_markers")) j.at("reflection_markers").get_to(cfg.reflection_markers);
  if (j.contains("transition_lexicon")) j.at("transition_lexicon").get_to(cfg.transition_lexicon);
  if (j.contains("instruction_text")) j.at("instruction_text").get_to(cfg.instruction_text);
}

RewardConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw input_error("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw input_error("config: malformed JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw input_error("config: top level must be an object");
  RewardConfig cfg = j.get<RewardConfig>();
  cfg.validate();
  return cfg;
}

}  // namespace tracekit
