#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "test_helpers.hpp"
#include "tracekit/attention.hpp"
#include "tracekit/probe.hpp"
#include "tracekit/reward.hpp"
#include "tracekit/synth.hpp"
#include "tracekit/trace.hpp"
#include "tracekit/uncertainty.hpp"

using namespace tracekit;
using nlohmann::json;
using testhelpers::TempDir;

namespace {

std::string binary() {
  const char* bin = std::getenv("TRACEKIT_BIN");
  REQUIRE(bin != nullptr);
  return bin;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunResult run(const std::string& args, const std::filesystem::path& scratch) {
  const auto out_file = scratch / "stdout.txt";
  const auto err_file = scratch / "stderr.txt";
  const std::string cmd = binary() + " " + args + " >" + out_file.string() + " 2>" +
                          err_file.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WEXITSTATUS(status);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

GenerationTrace fixture_trace(uint64_t seed) {
  SynthSpec spec;
  spec.seed = seed;
  spec.steps = 24;
  spec.layers = 24;
  spec.heads = 2;
  spec.visual_tokens = 8;
  spec.vocab = 48;
  spec.pivot_positions = {6};
  spec.reflection_positions = {12};
  spec.attn_pre = 0.4;
  spec.attn_dip = 0.08;
  spec.attn_recovery = 0.35;
  spec.answer = "42";
  return synth_trace(spec);
}

}  // namespace

TEST_CASE("analyze emits the declared artifacts and flags planted pivots") {
  TempDir dir("cli_analyze");
  write_trace(fixture_trace(1), dir.path() / "trace");
  const auto out_dir = dir.path() / "out";

  const auto r = run("--no-timestamp --out " + out_dir.string() + " analyze " +
                         (dir.path() / "trace").string(),
                     dir.path());
  CHECK(r.exit_code == 0);

  for (const char* name :
       {"entropy.csv", "attention_profile.csv", "mid_share.csv", "u_score.csv",
        "bundle.json"})
    CHECK(std::filesystem::exists(out_dir / name));

  // The pivot CSV flags exactly the planted pivot step.
  std::ifstream in(out_dir / "entropy.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,entropy,is_pivot");
  std::vector<int> pivots;
  int step = 0;
  while (std::getline(in, line)) {
    if (line.size() >= 2 && line.substr(line.size() - 2) == ",1")
      pivots.push_back(step);
    ++step;
  }
  CHECK(pivots == std::vector<int>{6});

  // Bundle lists the artifact set and echoes the effective config.
  json bundle = json::parse(std::ifstream(out_dir / "bundle.json"));
  CHECK(bundle.at("effective_config").at("tau_ent") == 1.0);
  CHECK(bundle.contains("timestamp") == false);
  CHECK(bundle.at("artifacts").size() == 4);
}

TEST_CASE("analyze artifacts are byte-identical across invocations") {
  TempDir dir("cli_repeat");
  write_trace(fixture_trace(6), dir.path() / "trace");
  const auto o1 = dir.path() / "o1";
  const auto o2 = dir.path() / "o2";
  for (const auto& out : {o1, o2})
    REQUIRE(run("--no-timestamp --out " + out.string() + " analyze " +
                    (dir.path() / "trace").string(),
                dir.path())
                .exit_code == 0);
  for (const char* name :
       {"entropy.csv", "attention_profile.csv", "mid_share.csv", "bundle.json"}) {
    std::stringstream s1, s2;
    s1 << std::ifstream(o1 / name).rdbuf();
    s2 << std::ifstream(o2 / name).rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK_FALSE(s1.str().empty());
  }
}

TEST_CASE("analyze --format json carries the same numbers as the CSV") {
  TempDir dir("cli_formats");
  write_trace(fixture_trace(2), dir.path() / "trace");

  const auto csv_dir = dir.path() / "csv_out";
  const auto json_dir = dir.path() / "json_out";
  CHECK(run("--no-timestamp --out " + csv_dir.string() + " analyze " +
                (dir.path() / "trace").string(),
            dir.path())
            .exit_code == 0);
  CHECK(run("--no-timestamp --format json --out " + json_dir.string() + " analyze " +
                (dir.path() / "trace").string(),
            dir.path())
            .exit_code == 0);

  json entropy = json::parse(std::ifstream(json_dir / "entropy.json"));
  std::ifstream csv(csv_dir / "entropy.csv");
  std::string line;
  std::getline(csv, line);  // header
  size_t idx = 0;
  while (std::getline(csv, line)) {
    const auto first_comma = line.find(',');
    const auto second_comma = line.find(',', first_comma + 1);
    const double csv_entropy =
        std::strtod(line.substr(first_comma + 1, second_comma - first_comma - 1).c_str(),
                    nullptr);
    CHECK(entropy.at(idx).at("entropy").get<double>() ==
          doctest::Approx(csv_entropy).epsilon(1e-14));
    ++idx;
  }
  CHECK(idx == 24);
}

TEST_CASE("analyze on a missing manifest exits 2 and names the path") {
  TempDir dir("cli_missing");
  const auto r =
      run("analyze " + (dir.path() / "absent").string() + " --out " +
              (dir.path() / "out").string(),
          dir.path());
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("absent") != std::string::npos);

  const auto rj = run("--error-json analyze " + (dir.path() / "absent").string(),
                      dir.path());
  CHECK(rj.exit_code == 2);
  const json err = json::parse(rj.err);
  CHECK(err.at("exit_code") == 2);
}

TEST_CASE("reward output matches the library bit-for-bit") {
  TempDir dir("cli_reward");
  const auto trace = fixture_trace(3);
  write_trace(trace, dir.path() / "trace");

  const auto r = run("reward " + (dir.path() / "trace").string() + " --truth 42",
                     dir.path());
  REQUIRE(r.exit_code == 0);
  const json out = json::parse(r.out);

  RewardConfig cfg;
  const auto profile = attention::compute_profile(trace, cfg);
  const auto mask =
      uncertainty::pivot_mask(uncertainty::entropy_landscape(trace), cfg.tau_ent);
  const auto breakdown = reward::reward_total(trace, profile, mask, "42", cfg);

  CHECK(out.at("r_outcome").get<double>() == breakdown.r_outcome);
  CHECK(out.at("r_local").get<double>() == breakdown.r_local);
  CHECK(out.at("r_global").get<double>() == breakdown.r_global);
  CHECK(out.at("r_reflect").get<double>() == breakdown.r_reflect);
  CHECK(out.at("r_total").get<double>() == breakdown.r_total);
}

TEST_CASE("reward batch mode emits one JSON line per trace") {
  TempDir dir("cli_batch");
  const auto batch = dir.path() / "batch";
  for (uint64_t seed = 0; seed < 3; ++seed)
    write_trace(fixture_trace(seed), batch / ("t" + std::to_string(seed)));

  const auto r = run("reward " + batch.string() + " --truth 42", dir.path());
  REQUIRE(r.exit_code == 0);
  int lines = 0;
  std::istringstream is(r.out);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    CHECK(j.at("r_outcome") == 1.0);
    ++lines;
  }
  CHECK(lines == 3);

  // --truth-file path
  std::ofstream(dir.path() / "truth.txt") << "42\n";
  const auto rf = run("reward " + batch.string() + " --truth-file " +
                          (dir.path() / "truth.txt").string(),
                      dir.path());
  CHECK(rf.exit_code == 0);
  CHECK(rf.out == r.out);

  const auto bad = run("reward " + batch.string() + " --truth-file " +
                           (dir.path() / "nope.txt").string(),
                       dir.path());
  CHECK(bad.exit_code == 2);
}

TEST_CASE("probe finds a planted onset and surfaces fit errors") {
  TempDir dir("cli_probe");
  std::mt19937_64 rng(9);
  const int64_t layers = 6;
  const int64_t d = 5;
  const int onset = 4;

  probe::BackgroundPool pool;
  pool.layers = layers;
  pool.dim = d;
  pool.samples = 40;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int64_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd states(pool.samples, d);
    for (int64_t i = 0; i < pool.samples; ++i)
      for (int64_t j = 0; j < d; ++j) states(i, j) = normal(rng);
    pool.states.push_back(states);
  }
  probe::write_background(pool, dir.path() / "bg");

  auto base = [&](const char* id) {
    GenerationTrace t;
    t.trace_id = id;
    t.steps = 1;
    t.layers = layers;
    t.heads = 1;
    t.visual_tokens = 1;
    t.vocab = 2;
    t.hidden_dim = d;
    t.layout = AttentionLayout::kHeadAvg;
    t.visual_region = {0, 1};
    t.answer_span = {0, 1};
    t.tokens = {{"x", 0}};
    t.step_entropy = {0.0f};
    t.attention.assign(static_cast<size_t>(layers), 0.5f);
    t.hidden_states.assign(static_cast<size_t>(layers * d), 0.0f);
    return t;
  };
  auto a = base("a");
  auto b = base("b");
  for (int64_t l = 0; l < layers; ++l)
    for (int64_t j = 0; j < d; ++j) {
      a.hidden_states[static_cast<size_t>(l * d + j)] = static_cast<float>(normal(rng));
      b.hidden_states[static_cast<size_t>(l * d + j)] =
          static_cast<float>(normal(rng)) + ((l + 1) >= onset ? 12.0f : 0.0f);
    }
  write_trace(a, dir.path() / "ta");
  write_trace(b, dir.path() / "tb");

  const auto out_dir = dir.path() / "out";
  const auto r = run("--no-timestamp --out " + out_dir.string() + " probe --background " +
                         (dir.path() / "bg").string() + " --trace-a " +
                         (dir.path() / "ta").string() + " --trace-b " +
                         (dir.path() / "tb").string() + " --step 0 --margin " +
                         std::to_string(6.0 * static_cast<double>(d)),
                     dir.path());
  REQUIRE(r.exit_code == 0);
  const json bundle = json::parse(std::ifstream(out_dir / "bundle.json"));
  CHECK(bundle.at("onset_layer") == onset);

  // identical pair: no onset, zero gaps
  const auto same_dir = dir.path() / "same";
  const auto rs = run("--no-timestamp --out " + same_dir.string() +
                          " probe --background " + (dir.path() / "bg").string() +
                          " --trace-a " + (dir.path() / "ta").string() + " --trace-b " +
                          (dir.path() / "ta").string() + " --step 0 --margin 1.0",
                      dir.path());
  REQUIRE(rs.exit_code == 0);
  const json same_bundle = json::parse(std::ifstream(same_dir / "bundle.json"));
  CHECK(same_bundle.at("onset_layer").is_null());

  // N=1 background: fit error surfaced as an input error
  probe::BackgroundPool tiny = pool;
  tiny.samples = 1;
  for (auto& states : tiny.states) states = states.topRows(1);
  probe::write_background(tiny, dir.path() / "bg1");
  const auto rf = run("probe --background " + (dir.path() / "bg1").string() +
                          " --trace-a " + (dir.path() / "ta").string() + " --trace-b " +
                          (dir.path() / "tb").string() + " --step 0",
                      dir.path());
  CHECK(rf.exit_code == 2);
}

TEST_CASE("edit triggers deterministically under a fixed seed") {
  TempDir dir("cli_edit");
  write_trace(fixture_trace(4), dir.path() / "trace");
  const auto r1 = run("--seed 7 edit " + (dir.path() / "trace").string(), dir.path());
  const auto r2 = run("--seed 7 edit " + (dir.path() / "trace").string(), dir.path());
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.out == r2.out);
  const json j = json::parse(r1.out);
  CHECK(j.contains("triggered"));
  if (j.at("triggered").get<bool>()) {
    for (const auto& tok : j.at("train_tokens"))
      CHECK(tok.at("text").get<std::string>().find("<reflect>") == std::string::npos);
  }
}

TEST_CASE("edit splices a supplied continuation and excises the instruction") {
  TempDir dir("cli_edit_cont");
  write_trace(fixture_trace(8), dir.path() / "trace");
  std::ofstream(dir.path() / "cont.json")
      << R"([{"text":"wait","id":-1},{"text":"43","id":-1}])";
  // q=1 via config so the trigger is certain
  std::ofstream(dir.path() / "cfg.json") << R"({"trigger_prob": 1.0})";
  const auto r = run("--seed 3 --config " + (dir.path() / "cfg.json").string() +
                         " edit " + (dir.path() / "trace").string() +
                         " --continuation " + (dir.path() / "cont.json").string(),
                     dir.path());
  REQUIRE(r.exit_code == 0);
  const json j = json::parse(r.out);
  REQUIRE(j.at("triggered").get<bool>());
  const auto& train_tokens = j.at("train_tokens");
  CHECK(train_tokens.size() == 24 + 2);
  CHECK(train_tokens.back().at("text") == "43");
  const auto span = j.at("answer_span");
  CHECK(span.at(0) == 25);
  CHECK(span.at(1) == 26);
}

TEST_CASE("train writes report files and repeats byte-identically per seed") {
  TempDir dir("cli_train");
  const auto out1 = dir.path() / "run1";
  const auto out2 = dir.path() / "run2";
  const std::string args = "--no-timestamp --seed 5 train --iterations 8 --out ";
  REQUIRE(run(args + out1.string(), dir.path()).exit_code == 0);
  REQUIRE(run(args + out2.string(), dir.path()).exit_code == 0);

  for (const char* name : {"report.json", "series.csv", "replay.jsonl", "bundle.json"}) {
    std::ifstream f1(out1 / name), f2(out2 / name);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK_FALSE(s1.str().empty());
  }

  // --visual-reward off zeroes the component columns.
  const auto off_dir = dir.path() / "off";
  REQUIRE(run("--no-timestamp --seed 5 train --iterations 5 --visual-reward off --out " +
                  off_dir.string(),
              dir.path())
              .exit_code == 0);
  const json report = json::parse(std::ifstream(off_dir / "report.json"));
  for (const auto& it : report.at("iterations")) {
    CHECK(it.at("mean_r_local") == 0.0);
    CHECK(it.at("mean_r_global") == 0.0);
  }
}

TEST_CASE("synth produces a loadable trace that analyze accepts") {
  TempDir dir("cli_synth");
  const auto trace_dir = dir.path() / "t";
  const auto r = run("--seed 11 --out " + trace_dir.string() +
                         " synth --steps 20 --pivots 6 --reflections 11 --answer 42",
                     dir.path());
  REQUIRE(r.exit_code == 0);
  const auto loaded = load_trace(trace_dir);
  CHECK(loaded.steps == 20);
  CHECK(loaded.answer_text() == "42");

  const auto out = dir.path() / "out";
  CHECK(run("--no-timestamp --out " + out.string() + " analyze " + trace_dir.string(),
            dir.path())
            .exit_code == 0);

  // inconsistent spec -> input error
  CHECK(run("synth --steps 5 --pivots 9 --out " + (dir.path() / "bad").string(),
            dir.path())
            .exit_code == 2);
}

TEST_CASE("report renders an SVG from a CSV series") {
  TempDir dir("cli_report");
  const auto csv_path = dir.path() / "series.csv";
  std::ofstream(csv_path) << "step,value\n0,0.1\n1,0.3\n2,0.2\n";
  const auto svg_path = dir.path() / "plot.svg";
  const auto r = run("--out " + svg_path.string() + " report " + csv_path.string() +
                         " --x step --y value --title demo",
                     dir.path());
  REQUIRE(r.exit_code == 0);
  std::ifstream svg(svg_path);
  std::stringstream ss;
  ss << svg.rdbuf();
  CHECK(ss.str().find("<svg") != std::string::npos);
  CHECK(ss.str().find("polyline") != std::string::npos);

  CHECK(run("report " + (dir.path() / "missing.csv").string() + " --y value",
            dir.path())
            .exit_code == 2);
}
