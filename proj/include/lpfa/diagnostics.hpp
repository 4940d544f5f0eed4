#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lpfa/attention.hpp"
#include "lpfa/linalg.hpp"

namespace lpfa {

/// Per-step decomposition of the lp-vs-hp gradient gap. With
/// coeffs = δ_lp - δ_hp, the dQ error is α diag(coeffs) (P K) and the W_Q
/// gradient error is the weighted sum of per-token rank-1 matrices
/// (P K)[T]ᵀ X[T]; the report carries both plus the structure analysis of
/// the rank-1 family.
struct GradErrorReport {
  Vec coeffs;                    // (δ_lp - δ_hp)[T], length N
  Mat dq_diff;                   // α diag(coeffs) (P K), N x d
  Mat dwq_diff;                  // α Σ_T coeffs[T] rank1_terms[T], d x D
  std::vector<Mat> rank1_terms;  // (P K)[T]ᵀ X[T], each d x D
  Mat similarity;  // pairwise cosine of flattened rank-1 terms, N x N
  double bias_sum = 0.0;  // Σ_T coeffs[T]
  Mat r_hat;  // mean of Frobenius-normalized nonzero rank-1 terms, d x D
  double rank1_residual = 0.0;  // relative residual of dwq_diff vs its
                                // projection onto r_hat
  std::size_t zero_terms = 0;   // rank-1 terms with zero Frobenius norm
};

/// tape must hold both O_lp and O_hp; X is the layer input (N x D) and K the
/// key matrix the scores were built from. Throws std::invalid_argument on
/// shape mismatch.
GradErrorReport grad_error_report(const AttnTape& tape, const Mat& dO,
                                  const Mat& X, const Mat& K, double alpha);

/// Running sum of bias_sum across steps. Requires at least one report.
std::vector<double> bias_cumsum(const std::vector<GradErrorReport>& reports);

/// Fraction of unordered pairs of nonzero rank-1 terms whose cosine
/// similarity exceeds threshold; 0 when fewer than two nonzero terms.
/// threshold must lie in (0, 1).
double similarity_summary(const GradErrorReport& report, double threshold);

/// Spectral norms of a fixed set of matrices sampled across training steps.
struct NormSeries {
  std::vector<std::size_t> steps;
  std::vector<std::string> names;          // one per tracked matrix
  std::vector<std::vector<double>> norms;  // norms[m][i]: names[m] at steps[i]
};

/// Appends one spectral-norm sample per weight. An empty series is
/// initialized with names "w0", "w1", ...; afterwards the weight count must
/// match the series.
NormSeries norm_tracker(const std::vector<Mat>& weights, std::size_t step,
                        NormSeries series);

/// Versioned JSON with every field; parses back bitwise.
std::string report_to_json(const GradErrorReport& report);
GradErrorReport report_from_json(const std::string& text);

/// One line per token: coeff, rank-1 term Frobenius norm, mean similarity
/// to the other tokens.
std::string report_summary_csv(const GradErrorReport& report);

/// Wide CSV (step, one column per tracked matrix); parses back bitwise.
std::string norm_series_csv(const NormSeries& series);
NormSeries norm_series_from_csv(const std::string& text);

}  // namespace lpfa
