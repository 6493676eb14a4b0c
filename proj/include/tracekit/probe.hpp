#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "tracekit/trace.hpp"

namespace tracekit::probe {

// Grounded-background statistics for one layer: arithmetic mean, unbiased
// covariance (N-1 denominator) plus diagonal regularization lambda*I.
// The Cholesky factorization is cached so distance queries are solves,
// never explicit inverses.
struct BackgroundStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov_reg;  // Sigma + lambda*I
  Eigen::LLT<Eigen::MatrixXd> llt;
  int64_t samples = 0;
  double lambda_reg = 0.0;

  int64_t dim() const { return mean.size(); }
};

// lambda = max(floor_abs, rel * mean diagonal of cov).
double auto_lambda(const Eigen::MatrixXd& cov, double rel = 1e-3, double floor_abs = 1e-6);

// states is N x d (one sample per row), N >= 2, lambda_reg > 0.
BackgroundStats fit_background(const Eigen::MatrixXd& states, double lambda_reg);

// Same, with lambda resolved by auto_lambda(rel) from the fitted covariance.
BackgroundStats fit_background_auto(const Eigen::MatrixXd& states, double rel = 1e-3);

// Squared Mahalanobis form (h-mu)^T SigmaReg^{-1} (h-mu), >= 0.
double mahalanobis(const BackgroundStats& stats, const Eigen::VectorXd& h);

struct LayerDivergenceRow {
  int layer = 0;  // 1-based
  double dm_a = 0.0;
  double dm_b = 0.0;
  double gap = 0.0;  // dm_b - dm_a
};

struct LayerDivergence {
  std::vector<LayerDivergenceRow> rows;   // one per layer, ascending
  std::optional<int> onset_layer;         // first layer with gap > margin
  double margin = 0.0;
};

// Compares hidden states of two traces at target_step against per-layer
// background stats (stats[l-1] for layer l). Both traces must carry
// hidden_states with matching L and d.
LayerDivergence layer_divergence(const GenerationTrace& a, const GenerationTrace& b,
                                 int64_t target_step,
                                 const std::vector<BackgroundStats>& stats,
                                 double margin);

// Row-major L x T matrix of {0,1}: does the layer-l unembedded argmax at
// step t agree with the final layer's. Requires hidden_states and
// unembedding.
std::vector<uint8_t> logit_lens_agreement(const GenerationTrace& trace);

// Caller-supplied pool of grounded hidden states, one N x d matrix per
// layer. Stored on disk as manifest.json + states_l<k>.f32 raw files.
struct BackgroundPool {
  int64_t layers = 0;
  int64_t dim = 0;
  int64_t samples = 0;
  std::vector<Eigen::MatrixXd> states;  // states[l-1] is N x d

  std::vector<BackgroundStats> fit_all(double lambda_reg) const;
  std::vector<BackgroundStats> fit_all_auto(double rel = 1e-3) const;
};

BackgroundPool load_background(const std::filesystem::path& dir);
void write_background(const BackgroundPool& pool, const std::filesystem::path& dir);

// Fitted stats container: manifest.json + per-layer mean/cov float64 raw
// files (dtype declared in the manifest).
void write_stats(const std::vector<BackgroundStats>& stats, const std::filesystem::path& dir);
std::vector<BackgroundStats> load_stats(const std::filesystem::path& dir);

}  // namespace tracekit::probe
