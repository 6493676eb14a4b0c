#include "tracekit/uncertainty.hpp"

#include <cctype>
#include <cmath>

#include "tracekit/errors.hpp"

namespace tracekit::uncertainty {

namespace {

template <typename Scalar>
double entropy_impl(std::span<const Scalar> dist) {
  double sum = 0.0;
  double h = 0.0;
  for (size_t i = 0; i < dist.size(); ++i) {
    const double p = static_cast<double>(dist[i]);
    if (p < 0.0)
      throw input_error("entropy: negative probability at index " + std::to_string(i));
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::fabs(sum - 1.0) > 1e-6)
    throw input_error("entropy: distribution sums to " + std::to_string(sum) +
                      ", outside 1 +/- 1e-6");
  return h;
}

}  // namespace

double shannon_entropy(std::span<const float> dist) { return entropy_impl(dist); }
double shannon_entropy(std::span<const double> dist) { return entropy_impl(dist); }

std::vector<double> entropy_landscape(const GenerationTrace& trace) {
  if (!trace.has_distributions() && !trace.has_entropy())
    throw input_error("entropy_landscape: trace carries neither step_distributions "
                      "nor step_entropy");

  if (!trace.has_distributions()) {
    return std::vector<double>(trace.step_entropy.begin(), trace.step_entropy.end());
  }

  std::vector<double> out(static_cast<size_t>(trace.steps));
  for (int64_t t = 0; t < trace.steps; ++t) {
    out[static_cast<size_t>(t)] = shannon_entropy(
        std::span<const float>(trace.dist_row(t), static_cast<size_t>(trace.vocab)));
  }
  if (trace.has_entropy()) {
    for (int64_t t = 0; t < trace.steps; ++t) {
      const double stored = static_cast<double>(trace.step_entropy[static_cast<size_t>(t)]);
      if (std::fabs(stored - out[static_cast<size_t>(t)]) > 1e-4)
        throw input_error("entropy_landscape: stored entropy " + std::to_string(stored) +
                          " at step " + std::to_string(t) +
                          " disagrees with recomputed " +
                          std::to_string(out[static_cast<size_t>(t)]));
    }
  }
  return out;
}

PivotMask pivot_mask(std::span<const double> landscape, double tau_ent) {
  PivotMask out;
  out.mask.resize(landscape.size(), false);
  for (size_t t = 0; t < landscape.size(); ++t) {
    if (!std::isfinite(landscape[t]))
      throw input_error("pivot_mask: non-finite entropy at step " + std::to_string(t));
    if (landscape[t] > tau_ent) {  // strict, H == tau is not a pivot
      out.mask[t] = true;
      out.pivot_positions.push_back(static_cast<int64_t>(t));
    }
  }
  out.n_pivot = static_cast<int64_t>(out.pivot_positions.size());
  return out;
}

std::string normalize_token(std::string_view text) {
  size_t begin = 0;
  size_t end = text.size();
  auto alnum = [](unsigned char c) { return std::isalnum(c) != 0; };
  while (begin < end && !alnum(static_cast<unsigned char>(text[begin]))) ++begin;
  while (end > begin && !alnum(static_cast<unsigned char>(text[end - 1]))) --end;
  std::string out;
  out.reserve(end - begin);
  for (size_t i = begin; i < end; ++i)
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
  return out;
}

std::vector<int64_t> transition_anchors(const std::vector<Token>& tokens,
                                        const std::set<std::string>& lexicon) {
  if (lexicon.empty()) throw input_error("transition_anchors: lexicon is empty");
  std::vector<int64_t> out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (lexicon.count(normalize_token(tokens[i].text)))
      out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

}  // namespace tracekit::uncertainty
