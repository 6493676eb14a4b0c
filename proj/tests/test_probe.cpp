#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "test_helpers.hpp"
#include "tracekit/errors.hpp"
#include "tracekit/probe.hpp"

using namespace tracekit;
using namespace tracekit::probe;

namespace {

Eigen::MatrixXd random_states(std::mt19937_64& rng, int64_t n, int64_t d,
                              double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::MatrixXd out(n, d);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out(i, j) = normal(rng);
  return out;
}

// Trace pair with planted hidden states; trace_b carries an offset from
// onset_layer upward.
std::pair<GenerationTrace, GenerationTrace> planted_pair(std::mt19937_64& rng,
                                                         int64_t layers, int64_t d,
                                                         int onset_layer, double offset) {
  auto base = [&](const char* id) {
    GenerationTrace t;
    t.trace_id = id;
    t.steps = 1;
    t.layers = layers;
    t.heads = 1;
    t.visual_tokens = 1;
    t.vocab = 2;
    t.layout = AttentionLayout::kHeadAvg;
    t.visual_region = {0, 1};
    t.answer_span = {0, 1};
    t.tokens = {{"x", 0}};
    t.step_entropy = {0.0f};
    t.hidden_dim = d;
    t.hidden_states.resize(static_cast<size_t>(layers * d));
    return t;
  };
  auto a = base("grounded");
  auto b = base("candidate");
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int64_t l = 0; l < layers; ++l) {
    for (int64_t j = 0; j < d; ++j) {
      a.hidden_states[static_cast<size_t>(l * d + j)] = static_cast<float>(normal(rng));
      b.hidden_states[static_cast<size_t>(l * d + j)] =
          static_cast<float>(normal(rng)) +
          (l + 1 >= onset_layer ? static_cast<float>(offset) : 0.0f);
    }
  }
  return {a, b};
}

}  // namespace

TEST_CASE("fit_background matches the hand-computed 1-d case") {
  Eigen::MatrixXd states(2, 1);
  states << 0.0, 2.0;
  const auto stats = fit_background(states, 0.5);
  CHECK(stats.mean[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(stats.cov_reg(0, 0) == doctest::Approx(2.5).epsilon(1e-15));  // 2 + 0.5
  CHECK(stats.samples == 2);
}

TEST_CASE("fit_background on identical samples yields lambda * I") {
  Eigen::MatrixXd states(5, 3);
  for (int64_t i = 0; i < 5; ++i) states.row(i) << 1.0, -2.0, 0.5;
  const auto stats = fit_background(states, 0.25);
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t c = 0; c < 3; ++c)
      CHECK(stats.cov_reg(r, c) == doctest::Approx(r == c ? 0.25 : 0.0).epsilon(1e-15));
}

TEST_CASE("fit_background matches a two-pass reference covariance") {
  std::mt19937_64 rng(101);
  const auto states = random_states(rng, 50, 4);
  const double lambda = 1e-3;
  const auto stats = fit_background(states, lambda);

  // Independent two-pass oracle.
  std::vector<double> mean(4, 0.0);
  for (int64_t i = 0; i < 50; ++i)
    for (int64_t j = 0; j < 4; ++j) mean[static_cast<size_t>(j)] += states(i, j);
  for (auto& m : mean) m /= 50.0;
  std::vector<std::vector<double>> cov(4, std::vector<double>(4, 0.0));
  for (int64_t i = 0; i < 50; ++i)
    for (int64_t r = 0; r < 4; ++r)
      for (int64_t c = 0; c < 4; ++c)
        cov[static_cast<size_t>(r)][static_cast<size_t>(c)] +=
            (states(i, r) - mean[static_cast<size_t>(r)]) *
            (states(i, c) - mean[static_cast<size_t>(c)]);
  for (auto& row : cov)
    for (auto& v : row) v /= 49.0;

  for (int64_t r = 0; r < 4; ++r) {
    CHECK(stats.mean[r] == doctest::Approx(mean[static_cast<size_t>(r)]).epsilon(1e-8));
    for (int64_t c = 0; c < 4; ++c) {
      const double expected =
          cov[static_cast<size_t>(r)][static_cast<size_t>(c)] + (r == c ? lambda : 0.0);
      CHECK(stats.cov_reg(r, c) == doctest::Approx(expected).epsilon(1e-8));
    }
  }
  // symmetric within 1e-8 (exactly, by construction)
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t c = 0; c < 4; ++c)
      CHECK(std::fabs(stats.cov_reg(r, c) - stats.cov_reg(c, r)) < 1e-8);
}

TEST_CASE("fit_background validates inputs") {
  Eigen::MatrixXd one(1, 2);
  one << 1.0, 2.0;
  CHECK_THROWS_AS(fit_background(one, 0.1), input_error);

  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 2.0, std::nan(""), 0.0;
  CHECK_THROWS_AS(fit_background(bad, 0.1), input_error);

  Eigen::MatrixXd ok(2, 2);
  ok << 1.0, 2.0, 3.0, 4.0;
  CHECK_THROWS_AS(fit_background(ok, 0.0), input_error);
}

TEST_CASE("mahalanobis basics") {
  std::mt19937_64 rng(7);
  const auto states = random_states(rng, 30, 3);
  const auto stats = fit_background(states, 1e-2);

  CHECK(mahalanobis(stats, stats.mean) == doctest::Approx(0.0).epsilon(1e-12));

  // Identity covariance: unit offset scores 1.
  BackgroundStats identity;
  identity.mean = Eigen::VectorXd::Zero(3);
  identity.cov_reg = Eigen::MatrixXd::Identity(3, 3);
  identity.llt.compute(identity.cov_reg);
  identity.samples = 2;
  identity.lambda_reg = 1.0;
  Eigen::VectorXd e1(3);
  e1 << 1.0, 0.0, 0.0;
  CHECK(mahalanobis(identity, e1) == doctest::Approx(1.0).epsilon(1e-12));

  Eigen::VectorXd wrong_dim(4);
  wrong_dim.setZero();
  CHECK_THROWS_AS(mahalanobis(identity, wrong_dim), input_error);
}

TEST_CASE("mahalanobis matches the explicit-inverse brute force") {
  std::mt19937_64 rng(55);
  for (int round = 0; round < 25; ++round) {
    const int64_t d = 2 + static_cast<int64_t>(rng() % 5);  // 2..6
    const auto states = random_states(rng, 40, d);
    const auto stats = fit_background(states, 1e-3);

    std::vector<double> mu(static_cast<size_t>(d));
    std::vector<std::vector<double>> cov(static_cast<size_t>(d),
                                         std::vector<double>(static_cast<size_t>(d)));
    for (int64_t i = 0; i < d; ++i) {
      mu[static_cast<size_t>(i)] = stats.mean[i];
      for (int64_t j = 0; j < d; ++j)
        cov[static_cast<size_t>(i)][static_cast<size_t>(j)] = stats.cov_reg(i, j);
    }

    std::normal_distribution<double> normal(0.0, 2.0);
    Eigen::VectorXd h(d);
    std::vector<double> h_std(static_cast<size_t>(d));
    for (int64_t i = 0; i < d; ++i) {
      h[i] = normal(rng);
      h_std[static_cast<size_t>(i)] = h[i];
    }
    const double expected = testhelpers::mahalanobis_bruteforce(h_std, mu, cov);
    CHECK(mahalanobis(stats, h) == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("mahalanobis is invariant under joint orthonormal rotation") {
  std::mt19937_64 rng(77);
  const int64_t d = 4;
  const auto states = random_states(rng, 60, d);
  const auto stats = fit_background(states, 1e-3);

  // Random orthonormal basis via QR.
  const Eigen::MatrixXd gaussian = random_states(rng, d, d);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
  const Eigen::MatrixXd q = qr.householderQ();

  std::normal_distribution<double> normal(0.0, 1.5);
  for (int round = 0; round < 10; ++round) {
    Eigen::VectorXd h(d);
    for (int64_t i = 0; i < d; ++i) h[i] = normal(rng);

    BackgroundStats rotated;
    rotated.mean = q * stats.mean;
    rotated.cov_reg = q * stats.cov_reg * q.transpose();
    rotated.llt.compute(rotated.cov_reg);
    rotated.samples = stats.samples;
    rotated.lambda_reg = stats.lambda_reg;

    CHECK(mahalanobis(rotated, q * h) ==
          doctest::Approx(mahalanobis(stats, h)).epsilon(1e-9));
  }
}

TEST_CASE("mahalanobis grows monotonically along a ray from the mean") {
  std::mt19937_64 rng(78);
  const auto states = random_states(rng, 30, 3);
  const auto stats = fit_background(states, 1e-3);
  Eigen::VectorXd direction(3);
  direction << 0.3, -1.0, 0.7;
  double previous = -1.0;
  for (double s = 0.0; s <= 5.0; s += 0.25) {
    const double dm = mahalanobis(stats, stats.mean + s * direction);
    CHECK(dm >= previous);
    previous = dm;
  }
}

TEST_CASE("mean in-sample distance equals d(N-1)/N as lambda vanishes") {
  std::mt19937_64 rng(79);
  const int64_t n = 40;
  const int64_t d = 5;
  const auto states = random_states(rng, n, d);
  const auto stats = fit_background(states, 1e-12);
  double mean_dm = 0.0;
  for (int64_t i = 0; i < n; ++i) mean_dm += mahalanobis(stats, states.row(i).transpose());
  mean_dm /= static_cast<double>(n);
  const double expected =
      static_cast<double>(d) * static_cast<double>(n - 1) / static_cast<double>(n);
  CHECK(mean_dm == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("auto_lambda scales with the covariance diagonal") {
  Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(3, 3) * 4.0;
  CHECK(auto_lambda(cov) == doctest::Approx(4e-3));
  Eigen::MatrixXd tiny = Eigen::MatrixXd::Identity(3, 3) * 1e-9;
  CHECK(auto_lambda(tiny) == doctest::Approx(1e-6));  // absolute floor
}

TEST_CASE("layer_divergence finds the planted onset layer") {
  std::mt19937_64 rng(91);
  const int64_t layers = 24;
  const int64_t d = 8;
  const int onset = 12;

  std::vector<BackgroundStats> stats;
  for (int64_t l = 0; l < layers; ++l)
    stats.push_back(fit_background(random_states(rng, 60, d), 1e-2));

  // Per-coordinate offset of 10 gives a squared distance near 100*d,
  // far beyond the margin at offset layers and unreachable below them.
  auto [a, b] = planted_pair(rng, layers, d, onset, 10.0);

  const double margin = 6.0 * static_cast<double>(d);
  const auto divergence = layer_divergence(a, b, 0, stats, margin);
  REQUIRE(divergence.onset_layer.has_value());
  CHECK(*divergence.onset_layer == onset);
  CHECK(divergence.rows.size() == static_cast<size_t>(layers));

  // Identical traces: zero gap at every layer.
  const auto same = layer_divergence(a, a, 0, stats, margin);
  CHECK_FALSE(same.onset_layer.has_value());
  for (const auto& row : same.rows) CHECK(row.gap == 0.0);
}

TEST_CASE("layer_divergence requires hidden states") {
  std::mt19937_64 rng(92);
  auto [a, b] = planted_pair(rng, 4, 3, 2, 5.0);
  auto missing = a;
  missing.hidden_states.clear();
  missing.hidden_dim = 0;
  std::vector<BackgroundStats> stats;
  for (int64_t l = 0; l < 4; ++l)
    stats.push_back(fit_background(random_states(rng, 20, 3), 1e-2));
  CHECK_THROWS_AS(layer_divergence(missing, b, 0, stats, 1.0), input_error);
}

TEST_CASE("logit_lens_agreement marks layers matching the final argmax") {
  const int64_t layers = 12;
  const int64_t d = 4;
  const int64_t vocab = 6;
  GenerationTrace t;
  t.trace_id = "lens";
  t.steps = 2;
  t.layers = layers;
  t.heads = 1;
  t.visual_tokens = 1;
  t.vocab = vocab;
  t.hidden_dim = d;
  t.layout = AttentionLayout::kHeadAvg;
  t.visual_region = {0, 1};
  t.answer_span = {1, 2};
  t.tokens = {{"a", 0}, {"b", 1}};
  t.step_entropy = {0.0f, 0.0f};

  // Unembedding rows: one-hot per vocab entry over the first d dims.
  t.unembedding.assign(static_cast<size_t>(vocab * d), 0.0f);
  for (int64_t v = 0; v < std::min(vocab, d); ++v)
    t.unembedding[static_cast<size_t>(v * d + v)] = 1.0f;

  // Layers 1..10 argmax dim 0, layers 11.. argmax dim 1.
  t.hidden_states.assign(static_cast<size_t>(t.steps * layers * d), 0.0f);
  for (int64_t s = 0; s < t.steps; ++s)
    for (int64_t l = 0; l < layers; ++l) {
      const int64_t hot = (l + 1) >= 11 ? 1 : 0;
      t.hidden_states[static_cast<size_t>((s * layers + l) * d + hot)] = 1.0f;
    }

  const auto agreement = logit_lens_agreement(t);
  for (int64_t l = 1; l <= layers; ++l)
    for (int64_t s = 0; s < t.steps; ++s)
      CHECK(agreement[static_cast<size_t>((l - 1) * t.steps + s)] == (l >= 11 ? 1 : 0));

  // Constant hidden states across layers agree everywhere.
  auto constant = t;
  for (int64_t s = 0; s < t.steps; ++s)
    for (int64_t l = 0; l < layers; ++l)
      for (int64_t j = 0; j < d; ++j)
        constant.hidden_states[static_cast<size_t>((s * layers + l) * d + j)] =
            t.hidden_states[static_cast<size_t>((s * layers + 0) * d + j)];
  for (uint8_t v : logit_lens_agreement(constant)) CHECK(v == 1);

  auto missing = t;
  missing.unembedding.clear();
  CHECK_THROWS_AS(logit_lens_agreement(missing), input_error);
}

TEST_CASE("background pool and fitted stats round-trip through disk") {
  testhelpers::TempDir dir("probe_io");
  std::mt19937_64 rng(123);

  BackgroundPool pool;
  pool.layers = 3;
  pool.dim = 4;
  pool.samples = 20;
  for (int64_t l = 0; l < 3; ++l) {
    Eigen::MatrixXd states = random_states(rng, 20, 4);
    // float32 storage: snap to f32 so the round-trip is exact
    for (int64_t i = 0; i < states.rows(); ++i)
      for (int64_t j = 0; j < states.cols(); ++j)
        states(i, j) = static_cast<double>(static_cast<float>(states(i, j)));
    pool.states.push_back(states);
  }
  write_background(pool, dir.path() / "pool");
  const auto loaded = load_background(dir.path() / "pool");
  CHECK(loaded.layers == 3);
  CHECK(loaded.dim == 4);
  CHECK(loaded.samples == 20);
  for (int64_t l = 0; l < 3; ++l) CHECK(loaded.states[static_cast<size_t>(l)] == pool.states[static_cast<size_t>(l)]);

  const auto stats = loaded.fit_all(1e-2);
  write_stats(stats, dir.path() / "stats");
  const auto stats2 = load_stats(dir.path() / "stats");
  REQUIRE(stats2.size() == stats.size());
  for (size_t l = 0; l < stats.size(); ++l) {
    CHECK(stats2[l].mean == stats[l].mean);
    CHECK(stats2[l].cov_reg == stats[l].cov_reg);
    CHECK(stats2[l].samples == stats[l].samples);
  }

  CHECK_THROWS_AS(load_background(dir.path() / "nope"), input_error);
}
