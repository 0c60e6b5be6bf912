#pragma once

// Cross-stream diversity: whitening, cross-correlation matrices, the spectral
// diversity index and the Barlow Twins decorrelation losses.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ndlab/autodiff.hpp"
#include "ndlab/rng.hpp"
#include "ndlab/tensor.hpp"

namespace ndlab::diversity {

enum class WhiteningMode {
  /// Per-dimension mean 0 / variance 1 (batch-norm style).
  kPerDimension,
  /// Zero mean, identity covariance (ZCA).
  kFull,
};

const char* to_string(WhiteningMode mode);
WhiteningMode parse_whitening_mode(const std::string& text);

inline constexpr double kVarianceFloor = 1e-5;

/// Per-stream design-layer features. Every stream tensor has the same shape
/// with the feature dimension last ([B, T, d] or already flattened [N, d]).
struct FeatureBatch {
  std::vector<Tensor> streams;
  bool whitened = false;
  WhiteningMode mode = WhiteningMode::kPerDimension;

  std::size_t stream_count() const { return streams.size(); }
  std::size_t rows() const;
  std::size_t dim() const;
  /// Stream i viewed as [rows, dim].
  Tensor flat(std::size_t i) const;
  void validate() const;
};

class RankDeficientError : public std::runtime_error {
 public:
  RankDeficientError(std::size_t stream, std::size_t rank, std::size_t dim,
                     double smallest_eigenvalue);
  std::size_t stream() const { return stream_; }
  std::size_t rank() const { return rank_; }
  std::size_t dim() const { return dim_; }
  double smallest_eigenvalue() const { return smallest_; }

 private:
  std::size_t stream_;
  std::size_t rank_;
  std::size_t dim_;
  double smallest_;
};

/// Full mode needs rows >= dim and a covariance of full numerical rank.
FeatureBatch whiten(const FeatureBatch& raw, WhiteningMode mode,
                    double variance_floor = kVarianceFloor);

struct CrossCorrelation {
  std::size_t i = 0;
  std::size_t j = 0;
  Tensor matrix;
  std::optional<double> spectral_norm;
};

/// C_ij = (1/N) sum_n z_i[n] z_j[n]^T over flattened positions.
CrossCorrelation cross_correlation(const FeatureBatch& batch, std::size_t i,
                                   std::size_t j);

struct SpectralNorm {
  double value = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Largest singular value by power iteration on M^T M from a fixed start
/// vector. Non-convergence returns the last estimate with converged = false.
SpectralNorm spectral_norm(const Tensor& matrix, double tol = 1e-8,
                           std::size_t max_iters = 1000);

struct PairNorm {
  std::size_t i = 0;
  std::size_t j = 0;
  double norm = 0.0;
  bool converged = true;
};

/// ||C_ij||_2 for every unordered pair i < j, in lexicographic order.
std::vector<PairNorm> pair_norms(const FeatureBatch& whitened);

/// Mean spectral norm of C_ij over ordered pairs i != j (equal to the
/// unordered mean). Needs P >= 2 and a whitened batch.
double d_spec(const FeatureBatch& whitened);

using StreamPair = std::pair<std::size_t, std::size_t>;

std::vector<StreamPair> all_pairs(std::size_t streams);

struct RandKConfig {
  std::size_t K = 1;
  /// Sampling weights over all_pairs(P); empty means uniform.
  std::vector<double> weights;
  std::uint64_t seed = 0;

  void validate(std::size_t streams) const;
};

/// K distinct unordered pairs, drawn without replacement proportionally to
/// the weights. Returned sorted.
std::vector<StreamPair> sample_pairs(std::size_t streams, const RandKConfig& config,
                                     Rng& rng);

// -- differentiable losses --------------------------------------------------

struct BtTerms {
  ad::Var loss;
  std::size_t pair_evaluations = 0;
};

/// Per-dimension standardization inside the graph; x is [N, d].
ad::Var standardize(ad::Var x, double variance_floor = kVarianceFloor);

/// Mean of ||C_ij - I||_F^2 over the given pairs, with standardization of
/// each used stream inside the graph. streams are raw [N, d] nodes.
BtTerms bt_loss_pairs(ad::Graph& graph, const std::vector<ad::Var>& streams,
                      std::span<const StreamPair> pairs,
                      double variance_floor = kVarianceFloor);

/// (1 / P(P-1)) sum_{i != j} ||C_ij - I||_F^2, evaluated over the
/// P(P-1)/2 unordered pairs.
BtTerms bt_loss_full(ad::Graph& graph, const std::vector<ad::Var>& streams,
                     double variance_floor = kVarianceFloor);

BtTerms bt_loss_randk(ad::Graph& graph, const std::vector<ad::Var>& streams,
                      const RandKConfig& config, Rng& rng,
                      double variance_floor = kVarianceFloor);

/// Value-level conveniences over raw (unwhitened) features.
double bt_loss_full(const FeatureBatch& raw);
double bt_loss_randk(const FeatureBatch& raw, const RandKConfig& config, Rng& rng);
double bt_loss_randk(const FeatureBatch& raw, const RandKConfig& config);

struct DiversityTraceRow {
  std::size_t step = 0;
  double d_spec = 0.0;
  double bt_loss = 0.0;
  WhiteningMode mode = WhiteningMode::kFull;
};

void write_diversity_trace_csv(const std::filesystem::path& path,
                               std::span<const DiversityTraceRow> rows);

}  // namespace ndlab::diversity
