// Command-line surface: trace analysis, reward scoring, representation
// probing, reflection editing, toy training and SVG report rendering.

#include <chrono>
#include <ctime>
#include <future>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tracekit/attention.hpp"
#include "tracekit/config.hpp"
#include "tracekit/errors.hpp"
#include "tracekit/probe.hpp"
#include "tracekit/reflect.hpp"
#include "tracekit/report.hpp"
#include "tracekit/reward.hpp"
#include "tracekit/synth.hpp"
#include "tracekit/toy.hpp"
#include "tracekit/trace.hpp"
#include "tracekit/uncertainty.hpp"

namespace tk = tracekit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out_dir;
  std::string format = "csv";
  bool no_timestamp = false;
  bool error_json = false;
  uint64_t seed = 0;
};

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&tt, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

tk::RewardConfig resolve_config(const GlobalOpts& opts) {
  if (!opts.config_path.empty()) return tk::load_config(opts.config_path);
  tk::RewardConfig cfg;
  cfg.validate();
  return cfg;
}

// Every bundle echoes the effective config and the exact artifact set.
void write_bundle(const fs::path& out_dir, const std::string& command,
                  const std::vector<std::string>& artifacts, const tk::RewardConfig& cfg,
                  const GlobalOpts& opts, const json& extra = json::object()) {
  json bundle;
  bundle["command"] = command;
  bundle["artifacts"] = artifacts;
  json cfg_json;
  tk::to_json(cfg_json, cfg);
  bundle["effective_config"] = cfg_json;
  if (!opts.no_timestamp) bundle["timestamp"] = iso_timestamp();
  for (const auto& item : extra.items()) bundle[item.key()] = item.value();
  tk::report::write_file_atomic(out_dir / "bundle.json", bundle.dump(2) + "\n");
}

std::optional<tk::attention::UScore> trace_u_score(const tk::GenerationTrace& trace,
                                                   const tk::attention::AttentionProfile& profile,
                                                   const tk::uncertainty::PivotMask& mask,
                                                   const tk::RewardConfig& cfg,
                                                   std::string* skip_reason) {
  if (!trace.frm_triggered || !trace.frm_trigger_pos) {
    *skip_reason = "no reflection trigger metadata";
    return std::nullopt;
  }
  const int64_t trigger = *trace.frm_trigger_pos;
  int64_t pivot = -1;
  for (int64_t p : mask.pivot_positions)
    if (p <= trigger) pivot = p;
  if (pivot < 0) pivot = trigger;

  int64_t reflect = -1;
  for (int64_t t = std::max<int64_t>(trigger, pivot + 1); t < trace.steps; ++t) {
    if (cfg.reflection_markers.count(
            tk::uncertainty::normalize_token(trace.tokens[static_cast<size_t>(t)].text))) {
      reflect = t;
      break;
    }
  }
  if (reflect < 0) {
    *skip_reason = "no reflection marker after the trigger";
    return std::nullopt;
  }
  tk::attention::UScoreWindows windows;
  windows.pre = std::min<int64_t>(5, pivot + 1);
  windows.post = std::min<int64_t>(cfg.reflection_window, trace.steps - reflect);
  if (windows.post < 1) {
    *skip_reason = "recovery window empty";
    return std::nullopt;
  }
  return tk::attention::u_score(profile.mid_share, pivot, reflect, windows);
}

int cmd_analyze(const GlobalOpts& opts, const std::string& trace_path, bool svg) {
  const auto cfg = resolve_config(opts);
  const auto trace = tk::load_trace(trace_path);
  const auto landscape = tk::uncertainty::entropy_landscape(trace);
  const auto mask = tk::uncertainty::pivot_mask(landscape, cfg.tau_ent);
  const auto profile = tk::attention::compute_profile(trace, cfg);

  const fs::path out_dir = opts.out_dir.empty() ? fs::path("analysis") : fs::path(opts.out_dir);
  fs::create_directories(out_dir);
  std::vector<std::string> artifacts;
  const bool as_json = opts.format == "json";

  auto emit = [&](const std::string& stem, const std::string& csv, const json& j) {
    const std::string name = stem + (as_json ? ".json" : ".csv");
    tk::report::write_file_atomic(out_dir / name, as_json ? j.dump(2) + "\n" : csv);
    artifacts.push_back(name);
  };

  emit("entropy", tk::report::landscape_csv(landscape, mask),
       tk::report::landscape_json(landscape, mask));
  emit("attention_profile", tk::report::profile_csv(profile),
       tk::report::profile_json(profile));
  emit("mid_share", tk::report::mid_share_csv(profile), json{{"mid_share", profile.mid_share}});

  json extra;
  std::string skip_reason;
  if (auto score = trace_u_score(trace, profile, mask, cfg, &skip_reason)) {
    emit("u_score", tk::report::u_score_csv(*score), tk::report::u_score_json(*score));
  } else {
    extra["u_score_skipped"] = skip_reason;
  }

  if (svg) {
    std::vector<double> xs(landscape.size());
    for (size_t i = 0; i < xs.size(); ++i) xs[i] = static_cast<double>(i);
    tk::report::write_file_atomic(
        out_dir / "entropy.svg",
        tk::report::svg_line_plot({{"entropy", xs, landscape}}, "token entropy"));
    tk::report::write_file_atomic(
        out_dir / "mid_share.svg",
        tk::report::svg_line_plot({{"mid_share", xs, profile.mid_share}},
                                  "mid-layer visual attention share"));
    artifacts.push_back("entropy.svg");
    artifacts.push_back("mid_share.svg");
  }

  extra["trace_id"] = trace.trace_id;
  extra["n_pivot"] = mask.n_pivot;
  extra["global_share"] = profile.global_share;
  write_bundle(out_dir, "analyze", artifacts, cfg, opts, extra);
  std::cout << "analysis written to " << out_dir.string() << "\n";
  return 0;
}

json score_one_trace(const fs::path& trace_dir, const std::string& truth,
                     const tk::RewardConfig& cfg) {
  const auto trace = tk::load_trace(trace_dir);
  const auto landscape = tk::uncertainty::entropy_landscape(trace);
  const auto mask = tk::uncertainty::pivot_mask(landscape, cfg.tau_ent);
  const auto profile = tk::attention::compute_profile(trace, cfg);
  const auto breakdown = tk::reward::reward_total(trace, profile, mask, truth, cfg);
  json j = tk::report::breakdown_json(breakdown);
  j["trace_id"] = trace.trace_id;
  return j;
}

int cmd_reward(const GlobalOpts& opts, const std::string& trace_path,
               std::string truth, const std::string& truth_file) {
  const auto cfg = resolve_config(opts);
  if (!truth_file.empty()) {
    std::ifstream in(truth_file);
    if (!in) throw tk::input_error("cannot open ground-truth file: " + truth_file);
    std::stringstream ss;
    ss << in.rdbuf();
    truth = ss.str();
    while (!truth.empty() && (truth.back() == '\n' || truth.back() == '\r'))
      truth.pop_back();
  }

  const fs::path root(trace_path);
  if (fs::exists(root / "manifest.json")) {
    std::cout << score_one_trace(root, truth, cfg).dump() << "\n";
    return 0;
  }

  // Batch directory: every child holding a manifest is a trace; one JSON
  // line each, ordered by path.
  std::vector<fs::path> members;
  if (!fs::is_directory(root)) throw tk::input_error("no trace at " + root.string());
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
      members.push_back(entry.path());
  }
  if (members.empty())
    throw tk::input_error("no traces found under " + root.string());
  std::sort(members.begin(), members.end());

  std::vector<std::future<json>> futures;
  futures.reserve(members.size());
  for (const auto& member : members) {
    futures.push_back(std::async(std::launch::async, [&, member] {
      return score_one_trace(member, truth, cfg);
    }));
  }
  std::string lines;
  for (auto& f : futures) lines += f.get().dump() + "\n";

  if (opts.out_dir.empty()) {
    std::cout << lines;
  } else {
    fs::create_directories(opts.out_dir);
    tk::report::write_file_atomic(fs::path(opts.out_dir) / "breakdowns.jsonl", lines);
    write_bundle(opts.out_dir, "reward", {"breakdowns.jsonl"}, cfg, opts,
                 json{{"traces", members.size()}});
    std::cout << "scored " << members.size() << " traces\n";
  }
  return 0;
}

int cmd_probe(const GlobalOpts& opts, const std::string& background_path,
              const std::string& trace_a_path, const std::string& trace_b_path,
              int64_t target_step, double margin) {
  const auto cfg = resolve_config(opts);
  const auto pool = tk::probe::load_background(background_path);
  const auto stats = pool.fit_all_auto(cfg.lambda_reg);
  const auto trace_a = tk::load_trace(trace_a_path);
  const auto trace_b = tk::load_trace(trace_b_path);
  const auto divergence =
      tk::probe::layer_divergence(trace_a, trace_b, target_step, stats, margin);

  const fs::path out_dir = opts.out_dir.empty() ? fs::path("probe") : fs::path(opts.out_dir);
  fs::create_directories(out_dir);
  tk::report::write_file_atomic(out_dir / "divergence.csv",
                                tk::report::divergence_csv(divergence));
  json extra;
  extra["onset_layer"] =
      divergence.onset_layer ? json(*divergence.onset_layer) : json(nullptr);
  extra["margin"] = margin;
  extra["target_step"] = target_step;
  write_bundle(out_dir, "probe", {"divergence.csv"}, cfg, opts, extra);
  std::cout << "divergence written to " << (out_dir / "divergence.csv").string() << "\n";
  return 0;
}

int cmd_edit(const GlobalOpts& opts, const std::string& trace_path,
             const std::string& continuation_file) {
  const auto cfg = resolve_config(opts);
  const auto trace = tk::load_trace(trace_path);
  tk::Rng rng(opts.seed);

  tk::reflect::Generator generator = [&](const std::vector<tk::Token>&) {
    tk::reflect::Continuation cont;
    if (!continuation_file.empty()) {
      json file_json;
      std::ifstream in(continuation_file);
      if (!in) throw tk::input_error("cannot open continuation file: " + continuation_file);
      in >> file_json;
      for (const auto& tok : file_json)
        cont.tokens.push_back(
            {tok.at("text").get<std::string>(), tok.value("id", int64_t{-1})});
      cont.logprobs.assign(cont.tokens.size(), 0.0);
      if (!cont.tokens.empty())
        cont.answer_span = tk::Span{static_cast<int64_t>(cont.tokens.size()) - 1,
                                    static_cast<int64_t>(cont.tokens.size())};
    }
    return cont;
  };

  const auto edit = tk::reflect::edit_trajectory(trace.trace_id, trace.tokens,
                                                 trace.answer_span, generator, cfg, rng);
  json j;
  j["id"] = edit.id;
  j["triggered"] = edit.triggered;
  if (edit.anchor_pos) j["anchor_pos"] = *edit.anchor_pos;
  j["instruction_span"] = {edit.instruction_span.begin, edit.instruction_span.end};
  j["answer_span"] = {edit.answer_span.begin, edit.answer_span.end};
  auto tokens_json = [](const std::vector<tk::Token>& tokens) {
    json arr = json::array();
    for (const auto& t : tokens) arr.push_back({{"text", t.text}, {"id", t.id}});
    return arr;
  };
  j["train_tokens"] = tokens_json(edit.train_tokens);
  j["continuation"] = tokens_json(edit.continuation);

  if (opts.out_dir.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    fs::create_directories(opts.out_dir);
    tk::report::write_file_atomic(fs::path(opts.out_dir) / "edit.json", j.dump(2) + "\n");
    write_bundle(opts.out_dir, "edit", {"edit.json"}, cfg, opts);
  }
  return 0;
}

// Train-specific configuration: a JSON object that may nest the reward
// config under "reward".
tk::toy::TrainConfig resolve_train_config(const GlobalOpts& opts) {
  tk::toy::TrainConfig cfg = tk::toy::default_toy_config();
  if (opts.config_path.empty()) return cfg;
  std::ifstream in(opts.config_path);
  if (!in) throw tk::input_error("cannot open config: " + opts.config_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw tk::input_error(std::string("malformed train config: ") + e.what());
  }
  if (j.contains("reward")) j.at("reward").get_to(cfg.reward);
  if (j.contains("world")) {
    const auto& w = j.at("world");
    if (w.contains("visual_slots")) w.at("visual_slots").get_to(cfg.world.visual_slots);
    if (w.contains("answer_classes")) w.at("answer_classes").get_to(cfg.world.answer_classes);
    if (w.contains("desc_tokens")) w.at("desc_tokens").get_to(cfg.world.desc_tokens);
    if (w.contains("desc_steps")) w.at("desc_steps").get_to(cfg.world.desc_steps);
    if (w.contains("verify_steps")) w.at("verify_steps").get_to(cfg.world.verify_steps);
    if (w.contains("reflect_verify_steps"))
      w.at("reflect_verify_steps").get_to(cfg.world.reflect_verify_steps);
    if (w.contains("layers")) w.at("layers").get_to(cfg.world.layers);
  }
  if (j.contains("iterations")) j.at("iterations").get_to(cfg.iterations);
  if (j.contains("group_size")) j.at("group_size").get_to(cfg.group_size);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(cfg.learning_rate);
  if (j.contains("clip_eps")) j.at("clip_eps").get_to(cfg.clip_eps);
  if (j.contains("eps_adv")) j.at("eps_adv").get_to(cfg.eps_adv);
  if (j.contains("kl_coeff")) j.at("kl_coeff").get_to(cfg.kl_coeff);
  if (j.contains("temperature")) j.at("temperature").get_to(cfg.temperature);
  if (j.contains("visual_reward")) j.at("visual_reward").get_to(cfg.visual_reward);
  if (j.contains("forced_reflection"))
    j.at("forced_reflection").get_to(cfg.forced_reflection);
  if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
  if (j.contains("replay_capacity")) j.at("replay_capacity").get_to(cfg.replay_capacity);
  if (j.contains("sft_batch_cap")) j.at("sft_batch_cap").get_to(cfg.sft_batch_cap);
  if (j.contains("eval_episodes")) j.at("eval_episodes").get_to(cfg.eval_episodes);
  return cfg;
}

int cmd_train(const GlobalOpts& opts, std::optional<int64_t> iterations,
              std::optional<std::string> visual_reward,
              std::optional<std::string> reflection, bool seed_given) {
  auto cfg = resolve_train_config(opts);
  if (seed_given) cfg.seed = opts.seed;
  if (iterations) cfg.iterations = *iterations;
  auto parse_toggle = [](const std::string& v, const char* flag) {
    if (v == "on") return true;
    if (v == "off") return false;
    throw tk::input_error(std::string(flag) + " must be 'on' or 'off'");
  };
  if (visual_reward) cfg.visual_reward = parse_toggle(*visual_reward, "--visual-reward");
  if (reflection) cfg.forced_reflection = parse_toggle(*reflection, "--reflection");

  const auto outcome = tk::toy::train(cfg);

  const fs::path out_dir = opts.out_dir.empty() ? fs::path("training") : fs::path(opts.out_dir);
  fs::create_directories(out_dir);
  json report_j = tk::report::training_report_json(outcome.report);
  if (!opts.no_timestamp) report_j["timestamp"] = iso_timestamp();
  tk::report::write_file_atomic(out_dir / "report.json", report_j.dump(2) + "\n");
  tk::report::write_file_atomic(out_dir / "series.csv",
                                tk::report::training_series_csv(outcome.report));
  tk::reflect::write_buffer_jsonl(outcome.buffer, out_dir / "replay.jsonl");
  write_bundle(out_dir, "train", {"report.json", "series.csv", "replay.jsonl"}, cfg.reward,
               opts,
               json{{"iterations", cfg.iterations},
                    {"seed", cfg.seed},
                    {"final_accuracy", outcome.report.final_accuracy},
                    {"final_pivot_window_mid_share",
                     outcome.report.final_pivot_window_mid_share},
                    {"final_mean_u_score", outcome.report.final_mean_u_score}});
  std::cout << "trained " << cfg.iterations << " iterations; final accuracy "
            << outcome.report.final_accuracy << ", pivot-window mid share "
            << outcome.report.final_pivot_window_mid_share << "\n";
  return 0;
}

int cmd_synth(const GlobalOpts& opts, const tk::SynthSpec& spec) {
  const auto trace = tk::synth_trace(spec);
  const fs::path out_dir =
      opts.out_dir.empty() ? fs::path(trace.trace_id) : fs::path(opts.out_dir);
  tk::write_trace(trace, out_dir);
  std::cout << "trace " << trace.trace_id << " written to " << out_dir.string() << "\n";
  return 0;
}

int cmd_report(const GlobalOpts& opts, const std::string& csv_path, const std::string& x_col,
               const std::vector<std::string>& y_cols, const std::string& title) {
  std::ifstream in(csv_path);
  if (!in) throw tk::input_error("cannot open CSV: " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw tk::input_error("empty CSV: " + csv_path);

  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur.push_back(c);
      }
    }
    out.push_back(cur);
    return out;
  };

  const auto header = split(line);
  auto column_index = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw tk::input_error("CSV has no column named '" + name + "'");
  };
  const size_t xi = column_index(x_col);
  std::vector<size_t> yis;
  for (const auto& y : y_cols) yis.push_back(column_index(y));

  std::vector<tk::report::Series> series(y_cols.size());
  for (size_t i = 0; i < y_cols.size(); ++i) series[i].label = y_cols[i];
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) continue;
    const double x = std::strtod(cells[xi].c_str(), nullptr);
    for (size_t i = 0; i < yis.size(); ++i) {
      series[i].x.push_back(x);
      series[i].y.push_back(std::strtod(cells[yis[i]].c_str(), nullptr));
    }
  }

  const std::string svg = tk::report::svg_line_plot(series, title);
  const fs::path out = opts.out_dir.empty()
                           ? fs::path(csv_path).replace_extension(".svg")
                           : fs::path(opts.out_dir);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  tk::report::write_file_atomic(out, svg);
  std::cout << "plot written to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reasoning-trace diagnostics and attention-guided reward toolkit"};
  app.require_subcommand(1);

  GlobalOpts opts;
  app.add_option("--config", opts.config_path, "config JSON path")
      ->envname("TRACEKIT_CONFIG");
  app.add_option("--out", opts.out_dir, "output directory (or file for 'report')");
  app.add_option("--format", opts.format, "artifact format")
      ->check(CLI::IsMember({"csv", "json"}));
  app.add_flag("--no-timestamp", opts.no_timestamp, "omit timestamps from outputs");
  app.add_flag("--error-json", opts.error_json, "emit errors as JSON on stderr");
  auto* seed_opt = app.add_option("--seed", opts.seed, "random seed");

  auto* analyze = app.add_subcommand("analyze", "entropy/pivot/attention analysis");
  analyze->fallthrough();
  std::string trace_path;
  bool svg = false;
  analyze->add_option("trace", trace_path, "trace directory")->required();
  analyze->add_flag("--svg", svg, "also render SVG line plots");

  auto* reward_cmd = app.add_subcommand("reward", "composite reward breakdown");
  reward_cmd->fallthrough();
  std::string reward_trace, truth, truth_file;
  reward_cmd->add_option("trace", reward_trace, "trace directory (or batch parent)")
      ->required();
  reward_cmd->add_option("--truth", truth, "ground-truth answer string");
  reward_cmd->add_option("--truth-file", truth_file, "file holding the ground truth");

  auto* probe_cmd = app.add_subcommand("probe", "layer-wise grounding divergence");
  probe_cmd->fallthrough();
  std::string background_path, trace_a, trace_b;
  int64_t target_step = 0;
  double margin = 1.0;
  probe_cmd->add_option("--background", background_path, "grounded-state pool directory")
      ->required();
  probe_cmd->add_option("--trace-a", trace_a, "grounded trace directory")->required();
  probe_cmd->add_option("--trace-b", trace_b, "candidate trace directory")->required();
  probe_cmd->add_option("--step", target_step, "target step")->required();
  probe_cmd->add_option("--margin", margin, "onset gap margin");

  auto* edit_cmd = app.add_subcommand("edit", "forced-reflection trajectory editing");
  edit_cmd->fallthrough();
  std::string edit_trace, continuation_file;
  edit_cmd->add_option("trace", edit_trace, "trace directory")->required();
  edit_cmd->add_option("--continuation", continuation_file,
                       "JSON token array for the reflection continuation");

  auto* train_cmd = app.add_subcommand("train", "toy policy-optimization loop");
  train_cmd->fallthrough();
  std::optional<int64_t> train_iterations;
  std::optional<std::string> visual_reward_flag, reflection_flag;
  train_cmd->add_option("--iterations", train_iterations, "override iteration count");
  train_cmd->add_option("--visual-reward", visual_reward_flag,
                        "dual-track attention reward: on|off");
  train_cmd->add_option("--reflection", reflection_flag,
                        "forced-reflection editing: on|off");

  auto* synth_cmd = app.add_subcommand("synth", "generate a seeded fixture trace");
  synth_cmd->fallthrough();
  tk::SynthSpec synth_spec;
  synth_cmd->add_option("--steps", synth_spec.steps, "step count T");
  synth_cmd->add_option("--layers", synth_spec.layers, "layer count L");
  synth_cmd->add_option("--heads", synth_spec.heads, "head count H");
  synth_cmd->add_option("--visual", synth_spec.visual_tokens, "visual token count V");
  synth_cmd->add_option("--vocab", synth_spec.vocab, "vocabulary size");
  synth_cmd->add_option("--pivots", synth_spec.pivot_positions, "pivot step indices");
  synth_cmd->add_option("--reflections", synth_spec.reflection_positions,
                        "reflection-marker step indices");
  synth_cmd->add_option("--attn-pre", synth_spec.attn_pre, "pre-pivot share level");
  synth_cmd->add_option("--attn-dip", synth_spec.attn_dip, "decoupling-dip share level");
  synth_cmd->add_option("--attn-recovery", synth_spec.attn_recovery,
                        "recovery share level");
  synth_cmd->add_option("--entropy-baseline", synth_spec.entropy_baseline,
                        "baseline entropy (nats)");
  synth_cmd->add_option("--entropy-spike", synth_spec.entropy_spike,
                        "pivot entropy (nats)");
  synth_cmd->add_option("--answer", synth_spec.answer, "planted answer string");
  std::string synth_layout = "FULL";
  synth_cmd->add_option("--layout", synth_layout, "FULL or HEADAVG");

  auto* report_cmd = app.add_subcommand("report", "render a CSV series as SVG");
  report_cmd->fallthrough();
  std::string report_csv, x_col = "step", report_title = "series";
  std::vector<std::string> y_cols;
  report_cmd->add_option("csv", report_csv, "input CSV")->required();
  report_cmd->add_option("--x", x_col, "x column name");
  report_cmd->add_option("--y", y_cols, "y column name(s)")->required();
  report_cmd->add_option("--title", report_title, "plot title");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*analyze) return cmd_analyze(opts, trace_path, svg);
    if (*reward_cmd) {
      if (truth.empty() && truth_file.empty())
        throw tk::input_error("reward: provide --truth or --truth-file");
      return cmd_reward(opts, reward_trace, truth, truth_file);
    }
    if (*probe_cmd)
      return cmd_probe(opts, background_path, trace_a, trace_b, target_step, margin);
    if (*edit_cmd) return cmd_edit(opts, edit_trace, continuation_file);
    if (*train_cmd)
      return cmd_train(opts, train_iterations, visual_reward_flag, reflection_flag,
                       seed_opt->count() > 0);
    if (*synth_cmd) {
      synth_spec.seed = opts.seed;
      synth_spec.layout = tk::layout_from_string(synth_layout);
      return cmd_synth(opts, synth_spec);
    }
    if (*report_cmd) return cmd_report(opts, report_csv, x_col, y_cols, report_title);
  } catch (const tk::input_error& e) {
    if (opts.error_json) {
      std::cerr << json{{"error", e.what()}, {"exit_code", 2}}.dump() << "\n";
    } else {
      std::cerr << "error: " << e.what() << "\n";
    }
    return 2;
  } catch (const std::exception& e) {
    if (opts.error_json) {
      std::cerr << json{{"error", e.what()}, {"exit_code", 1}}.dump() << "\n";
    } else {
      std::cerr << "internal error: " << e.what() << "\n";
    }
    return 1;
  }
  return 0;
}
