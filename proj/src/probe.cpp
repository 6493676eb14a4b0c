#include "tracekit/probe.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "fsio.hpp"
#include "tracekit/errors.hpp"

namespace tracekit::probe {

double auto_lambda(const Eigen::MatrixXd& cov, double rel, double floor_abs) {
  const double mean_diag = cov.diagonal().mean();
  return std::max(floor_abs, rel * mean_diag);
}

BackgroundStats fit_background(const Eigen::MatrixXd& states, double lambda_reg) {
  const int64_t n = states.rows();
  const int64_t d = states.cols();
  if (n < 2) throw input_error("fit_background: needs N >= 2 samples");
  if (!(lambda_reg > 0.0)) throw input_error("fit_background: lambda_reg must be > 0");
  if (!states.allFinite()) throw input_error("fit_background: non-finite input");

  BackgroundStats stats;
  stats.samples = n;
  stats.lambda_reg = lambda_reg;
  stats.mean = states.colwise().mean();
  const Eigen::MatrixXd centered = states.rowwise() - stats.mean.transpose();
  // X_c^T X_c is exactly symmetric element-wise, so no re-symmetrization.
  stats.cov_reg = (centered.transpose() * centered) / static_cast<double>(n - 1);
  stats.cov_reg += lambda_reg * Eigen::MatrixXd::Identity(d, d);
  stats.llt.compute(stats.cov_reg);
  if (stats.llt.info() != Eigen::Success)
    throw internal_error("fit_background: Cholesky factorization failed");
  return stats;
}

BackgroundStats fit_background_auto(const Eigen::MatrixXd& states, double rel) {
  const int64_t n = states.rows();
  if (n < 2) throw input_error("fit_background: needs N >= 2 samples");
  if (!states.allFinite()) throw input_error("fit_background: non-finite input");
  const Eigen::VectorXd mean = states.colwise().mean();
  const Eigen::MatrixXd centered = states.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(n - 1);
  return fit_background(states, auto_lambda(cov, rel));
}

double mahalanobis(const BackgroundStats& stats, const Eigen::VectorXd& h) {
  if (h.size() != stats.mean.size())
    throw input_error("mahalanobis: dimension mismatch (" + std::to_string(h.size()) +
                      " vs " + std::to_string(stats.mean.size()) + ")");
  if (!h.allFinite()) throw input_error("mahalanobis: non-finite input");
  const Eigen::VectorXd diff = h - stats.mean;
  const double dm = diff.dot(stats.llt.solve(diff));
  return std::max(0.0, dm);
}

LayerDivergence layer_divergence(const GenerationTrace& a, const GenerationTrace& b,
                                 int64_t target_step,
                                 const std::vector<BackgroundStats>& stats,
                                 double margin) {
  if (!a.has_hidden_states() || !b.has_hidden_states())
    throw input_error("layer_divergence: both traces must carry hidden_states");
  if (a.layers != b.layers || a.hidden_dim != b.hidden_dim)
    throw input_error("layer_divergence: trace layer/dim mismatch");
  if (target_step < 0 || target_step >= a.steps || target_step >= b.steps)
    throw input_error("layer_divergence: target_step outside both traces");
  if (static_cast<int64_t>(stats.size()) != a.layers)
    throw input_error("layer_divergence: expected " + std::to_string(a.layers) +
                      " per-layer stats, got " + std::to_string(stats.size()));

  LayerDivergence out;
  out.margin = margin;
  for (int layer = 1; layer <= a.layers; ++layer) {
    const auto& layer_stats = stats[static_cast<size_t>(layer - 1)];
    if (layer_stats.dim() != a.hidden_dim)
      throw input_error("layer_divergence: stats dimension mismatch at layer " +
                        std::to_string(layer));
    const Eigen::Map<const Eigen::VectorXf> ha(a.hidden_row(target_step, layer),
                                               a.hidden_dim);
    const Eigen::Map<const Eigen::VectorXf> hb(b.hidden_row(target_step, layer),
                                               b.hidden_dim);
    LayerDivergenceRow row;
    row.layer = layer;
    row.dm_a = mahalanobis(layer_stats, ha.cast<double>());
    row.dm_b = mahalanobis(layer_stats, hb.cast<double>());
    row.gap = row.dm_b - row.dm_a;
    if (!out.onset_layer && row.gap > margin) out.onset_layer = layer;
    out.rows.push_back(row);
  }
  return out;
}

std::vector<uint8_t> logit_lens_agreement(const GenerationTrace& trace) {
  if (!trace.has_hidden_states() || !trace.has_unembedding())
    throw input_error("logit_lens_agreement: needs hidden_states and unembedding");

  const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>>
      unembed(trace.unembedding.data(), trace.vocab, trace.hidden_dim);

  auto argmax_at = [&](int64_t t, int layer) {
    const Eigen::Map<const Eigen::VectorXf> h(trace.hidden_row(t, layer),
                                              trace.hidden_dim);
    Eigen::VectorXf logits = unembed * h;
    Eigen::Index best = 0;
    logits.maxCoeff(&best);  // ties resolve to the first index
    return best;
  };

  std::vector<uint8_t> out(static_cast<size_t>(trace.layers * trace.steps), 0);
  for (int64_t t = 0; t < trace.steps; ++t) {
    const Eigen::Index final_top = argmax_at(t, static_cast<int>(trace.layers));
    for (int layer = 1; layer <= trace.layers; ++layer) {
      out[static_cast<size_t>((layer - 1) * trace.steps + t)] =
          argmax_at(t, layer) == final_top ? 1 : 0;
    }
  }
  return out;
}

std::vector<BackgroundStats> BackgroundPool::fit_all(double lambda_reg) const {
  std::vector<BackgroundStats> out;
  out.reserve(states.size());
  for (const auto& layer_states : states) out.push_back(fit_background(layer_states, lambda_reg));
  return out;
}

std::vector<BackgroundStats> BackgroundPool::fit_all_auto(double rel) const {
  std::vector<BackgroundStats> out;
  out.reserve(states.size());
  for (const auto& layer_states : states) out.push_back(fit_background_auto(layer_states, rel));
  return out;
}

namespace {
constexpr const char* kPoolFormat = "tracekit-background/1";
constexpr const char* kStatsFormat = "tracekit-bgstats/1";
}  // namespace

BackgroundPool load_background(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw input_error("missing manifest: " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(fsio::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw input_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    if (m.at("format").get<std::string>() != kPoolFormat)
      throw input_error("unsupported background format");
    BackgroundPool pool;
    pool.layers = m.at("L").get<int64_t>();
    pool.dim = m.at("d").get<int64_t>();
    pool.samples = m.at("N").get<int64_t>();
    const auto files = m.at("files").get<std::vector<std::string>>();
    if (static_cast<int64_t>(files.size()) != pool.layers)
      throw input_error("background manifest declares " + std::to_string(pool.layers) +
                        " layers but lists " + std::to_string(files.size()) + " files");
    for (const auto& file : files) {
      auto raw = fsio::read_f32(dir / file);
      if (static_cast<int64_t>(raw.size()) != pool.samples * pool.dim)
        throw input_error("background file " + file + " holds " +
                          std::to_string(raw.size()) + " elements, expected " +
                          std::to_string(pool.samples * pool.dim));
      Eigen::MatrixXd mat(pool.samples, pool.dim);
      for (int64_t i = 0; i < pool.samples; ++i)
        for (int64_t j = 0; j < pool.dim; ++j)
          mat(i, j) = static_cast<double>(raw[static_cast<size_t>(i * pool.dim + j)]);
      pool.states.push_back(std::move(mat));
    }
    return pool;
  } catch (const nlohmann::json::exception& e) {
    throw input_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

void write_background(const BackgroundPool& pool, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = kPoolFormat;
  m["L"] = pool.layers;
  m["d"] = pool.dim;
  m["N"] = pool.samples;
  m["dtype"] = "f32";
  m["layer_index_base"] = 1;
  std::vector<std::string> files;
  for (int64_t layer = 1; layer <= pool.layers; ++layer) {
    const std::string file = "states_l" + std::to_string(layer) + ".f32";
    const auto& mat = pool.states[static_cast<size_t>(layer - 1)];
    std::vector<float> raw(static_cast<size_t>(mat.rows() * mat.cols()));
    for (int64_t i = 0; i < mat.rows(); ++i)
      for (int64_t j = 0; j < mat.cols(); ++j)
        raw[static_cast<size_t>(i * mat.cols() + j)] = static_cast<float>(mat(i, j));
    fsio::write_f32(dir / file, raw);
    files.push_back(file);
  }
  m["files"] = files;
  fsio::write_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

void write_stats(const std::vector<BackgroundStats>& stats,
                 const std::filesystem::path& dir) {
  if (stats.empty()) throw input_error("write_stats: empty stats list");
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = kStatsFormat;
  m["L"] = stats.size();
  m["d"] = stats.front().dim();
  m["dtype"] = "f64";
  m["layer_index_base"] = 1;
  auto layers = nlohmann::json::array();
  for (size_t i = 0; i < stats.size(); ++i) {
    const auto& s = stats[i];
    const std::string mean_file = "mean_l" + std::to_string(i + 1) + ".f64";
    const std::string cov_file = "cov_l" + std::to_string(i + 1) + ".f64";
    std::vector<double> mean(s.mean.data(), s.mean.data() + s.mean.size());
    std::vector<double> cov(static_cast<size_t>(s.cov_reg.size()));
    for (int64_t r = 0; r < s.cov_reg.rows(); ++r)
      for (int64_t c = 0; c < s.cov_reg.cols(); ++c)
        cov[static_cast<size_t>(r * s.cov_reg.cols() + c)] = s.cov_reg(r, c);
    fsio::write_f64(dir / mean_file, mean);
    fsio::write_f64(dir / cov_file, cov);
    layers.push_back({{"mean", mean_file},
                      {"cov", cov_file},
                      {"N", s.samples},
                      {"lambda_reg", s.lambda_reg}});
  }
  m["layers"] = layers;
  fsio::write_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<BackgroundStats> load_stats(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw input_error("missing manifest: " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(fsio::read_text(manifest_path));
    if (m.at("format").get<std::string>() != kStatsFormat)
      throw input_error("unsupported stats format");
    const int64_t d = m.at("d").get<int64_t>();
    std::vector<BackgroundStats> out;
    for (const auto& layer : m.at("layers")) {
      BackgroundStats s;
      s.samples = layer.at("N").get<int64_t>();
      s.lambda_reg = layer.at("lambda_reg").get<double>();
      auto mean = fsio::read_f64(dir / layer.at("mean").get<std::string>());
      auto cov = fsio::read_f64(dir / layer.at("cov").get<std::string>());
      if (static_cast<int64_t>(mean.size()) != d ||
          static_cast<int64_t>(cov.size()) != d * d)
        throw input_error("stats tensor size mismatch in " + dir.string());
      s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), d);
      s.cov_reg.resize(d, d);
      for (int64_t r = 0; r < d; ++r)
        for (int64_t c = 0; c < d; ++c)
          s.cov_reg(r, c) = cov[static_cast<size_t>(r * d + c)];
      s.llt.compute(s.cov_reg);
      if (s.llt.info() != Eigen::Success)
        throw input_error("stats covariance in " + dir.string() +
                          " is not positive definite");
      out.push_back(std::move(s));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw input_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace tracekit::probe
