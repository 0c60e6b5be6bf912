#include "ndlab/diversity.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ndlab/csv.hpp"

namespace ndlab::diversity {

const char* to_string(WhiteningMode mode) {
  return mode == WhiteningMode::kFull ? "full" : "per_dimension";
}

WhiteningMode parse_whitening_mode(const std::string& text) {
  if (text == "full") return WhiteningMode::kFull;
  if (text == "per_dimension" || text == "per-dimension") return WhiteningMode::kPerDimension;
  throw std::invalid_argument("unknown whitening mode '" + text + "'");
}

std::size_t FeatureBatch::dim() const {
  if (streams.empty() || streams[0].rank() == 0) return 0;
  return streams[0].shape().back();
}

std::size_t FeatureBatch::rows() const {
  const std::size_t d = dim();
  return d == 0 ? 0 : streams[0].size() / d;
}

Tensor FeatureBatch::flat(std::size_t i) const {
  return streams.at(i).reshaped({rows(), dim()});
}

void FeatureBatch::validate() const {
  if (streams.empty()) throw std::invalid_argument("feature batch has no streams");
  for (std::size_t i = 0; i < streams.size(); ++i) {
    if (streams[i].rank() < 2) {
      throw std::invalid_argument("stream " + std::to_string(i) + " must be rank >= 2");
    }
    if (streams[i].shape() != streams[0].shape()) {
      throw std::invalid_argument("stream " + std::to_string(i) + " has shape " +
                                  shape_to_string(streams[i].shape()) + ", expected " +
                                  shape_to_string(streams[0].shape()));
    }
  }
}

RankDeficientError::RankDeficientError(std::size_t stream, std::size_t rank,
                                       std::size_t dim, double smallest)
    : std::runtime_error("stream " + std::to_string(stream) +
                         ": covariance rank " + std::to_string(rank) + " < dim " +
                         std::to_string(dim) + " (smallest eigenvalue " +
                         std::to_string(smallest) + ")"),
      stream_(stream),
      rank_(rank),
      dim_(dim),
      smallest_(smallest) {}

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const MatrixRM> as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const MatrixRM>(t.data().data(), static_cast<Eigen::Index>(rows),
                                    static_cast<Eigen::Index>(cols));
}

Tensor whiten_per_dimension(const Tensor& x, double floor) {
  const std::size_t n = x.shape()[0];
  const std::size_t d = x.shape()[1];
  Tensor out(x.shape());
  for (std::size_t c = 0; c < d; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += x.at(r, c);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t r = 0; r < n; ++r) v += (x.at(r, c) - m) * (x.at(r, c) - m);
    v /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(std::max(v, floor));
    for (std::size_t r = 0; r < n; ++r) out.at(r, c) = (x.at(r, c) - m) * inv;
  }
  return out;
}

Tensor whiten_full(const Tensor& x, std::size_t stream) {
  const std::size_t n = x.shape()[0];
  const std::size_t d = x.shape()[1];
  if (n < d) throw RankDeficientError(stream, n, d, 0.0);
  const auto m = as_matrix(x, n, d);
  const Eigen::RowVectorXd mean = m.colwise().mean();
  const MatrixRM centered = m.rowwise() - mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double top = std::max(lambda.maxCoeff(), 0.0);
  const double cutoff = std::max(top, 1.0) * 1e-10;
  std::size_t rank = 0;
  for (Eigen::Index k = 0; k < lambda.size(); ++k) {
    if (lambda[k] > cutoff) ++rank;
  }
  if (rank < d) throw RankDeficientError(stream, rank, d, lambda.minCoeff());
  const Eigen::MatrixXd& u = eig.eigenvectors();
  const Eigen::MatrixXd w =
      u * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * u.transpose();
  const MatrixRM z = centered * w;
  Tensor out(x.shape());
  std::copy(z.data(), z.data() + z.size(), out.data().begin());
  return out;
}

}  // namespace

FeatureBatch whiten(const FeatureBatch& raw, WhiteningMode mode, double variance_floor) {
  raw.validate();
  FeatureBatch out;
  out.whitened = true;
  out.mode = mode;
  for (std::size_t i = 0; i < raw.stream_count(); ++i) {
    const Tensor x = raw.flat(i);
    Tensor w = mode == WhiteningMode::kFull ? whiten_full(x, i)
                                            : whiten_per_dimension(x, variance_floor);
    out.streams.push_back(w.reshaped(raw.streams[i].shape()));
  }
  return out;
}

CrossCorrelation cross_correlation(const FeatureBatch& batch, std::size_t i, std::size_t j) {
  batch.validate();
  if (!batch.whitened) throw std::invalid_argument("cross_correlation needs whitened features");
  if (i >= batch.stream_count() || j >= batch.stream_count()) {
    throw std::out_of_range("stream index out of range");
  }
  const std::size_t n = batch.rows();
  const std::size_t d = batch.dim();
  const auto zi = as_matrix(batch.streams[i], n, d);
  const auto zj = as_matrix(batch.streams[j], n, d);
  const MatrixRM c = (zi.transpose() * zj) / static_cast<double>(n);
  CrossCorrelation out;
  out.i = i;
  out.j = j;
  out.matrix = Tensor({d, d});
  std::copy(c.data(), c.data() + c.size(), out.matrix.data().begin());
  return out;
}

SpectralNorm spectral_norm(const Tensor& matrix, double tol, std::size_t max_iters) {
  if (matrix.rank() != 2) throw std::invalid_argument("spectral_norm needs a matrix");
  for (double v : matrix.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("spectral_norm: non-finite entry");
  }
  const std::size_t rows = matrix.shape()[0];
  const std::size_t cols = matrix.shape()[1];
  std::vector<double> v(cols);
  Rng rng(0x5eedULL);
  std::normal_distribution<double> normal;
  for (double& x : v) x = 1.0 + 0.1 * normal(rng);
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0) {
      for (double& e : x) e /= s;
    }
    return s;
  };
  normalize(v);
  std::vector<double> mv(rows);
  std::vector<double> w(cols);
  SpectralNorm out;
  double prev = -1.0;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += matrix.at(r, c) * v[c];
      mv[r] = acc;
    }
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) w[c] += matrix.at(r, c) * mv[r];
    }
    const double lambda = normalize(w);
    const double sigma = std::sqrt(lambda);
    out.value = sigma;
    out.iterations = it;
    if (lambda == 0.0 || std::abs(sigma - prev) < tol) {
      out.converged = true;
      break;
    }
    prev = sigma;
    v.swap(w);
  }
  return out;
}

std::vector<StreamPair> all_pairs(std::size_t streams) {
  std::vector<StreamPair> pairs;
  for (std::size_t i = 0; i < streams; ++i) {
    for (std::size_t j = i + 1; j < streams; ++j) pairs.emplace_back(i, j);
  }
  return pairs;
}

std::vector<PairNorm> pair_norms(const FeatureBatch& whitened) {
  std::vector<PairNorm> out;
  for (const auto& [i, j] : all_pairs(whitened.stream_count())) {
    const CrossCorrelation c = cross_correlation(whitened, i, j);
    const SpectralNorm s = spectral_norm(c.matrix);
    out.push_back({i, j, s.value, s.converged});
  }
  return out;
}

double d_spec(const FeatureBatch& whitened) {
  if (whitened.stream_count() < 2) throw std::invalid_argument("d_spec needs P >= 2");
  const auto norms = pair_norms(whitened);
  double total = 0.0;
  for (const PairNorm& p : norms) total += p.norm;
  return total / static_cast<double>(norms.size());
}

void RandKConfig::validate(std::size_t streams) const {
  const std::size_t n_pairs = streams * (streams - 1) / 2;
  if (K < 1 || K > n_pairs) {
    throw std::invalid_argument("RandK: K = " + std::to_string(K) + " outside [1, " +
                                std::to_string(n_pairs) + "]");
  }
  if (!weights.empty()) {
    if (weights.size() != n_pairs) throw std::invalid_argument("RandK: one weight per pair");
    double s = 0.0;
    std::size_t positive = 0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("RandK: negative weight");
      s += w;
      if (w > 0.0) ++positive;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("RandK: weights must sum to 1");
    if (positive < K) throw std::invalid_argument("RandK: fewer supported pairs than K");
  }
}

std::vector<StreamPair> sample_pairs(std::size_t streams, const RandKConfig& config, Rng& rng) {
  config.validate(streams);
  const auto pairs = all_pairs(streams);
  std::vector<double> w = config.weights;
  if (w.empty()) w.assign(pairs.size(), 1.0);
  std::vector<std::size_t> chosen;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < config.K; ++k) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double u = unit(rng) * total;
    std::size_t pick = 0;
    for (; pick + 1 < w.size(); ++pick) {
      if (w[pick] > 0.0 && u < w[pick]) break;
      u -= w[pick];
    }
    while (w[pick] == 0.0) --pick;  // guard against rounding past the end
    chosen.push_back(pick);
    w[pick] = 0.0;
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<StreamPair> out;
  for (std::size_t c : chosen) out.push_back(pairs[c]);
  return out;
}

ad::Var standardize(ad::Var x, double variance_floor) {
  ad::Var centered = x - ad::column_mean(x);
  ad::Var var = ad::column_mean(centered * centered);
  return centered * ad::rsqrt_floor(var, variance_floor);
}

BtTerms bt_loss_pairs(ad::Graph& graph, const std::vector<ad::Var>& streams,
                      std::span<const StreamPair> pairs, double variance_floor) {
  if (streams.size() < 2) throw std::invalid_argument("Barlow Twins loss needs P >= 2");
  if (pairs.empty()) throw std::invalid_argument("Barlow Twins loss needs at least one pair");
  const Shape s = streams[0].shape();
  if (s.size() != 2) throw std::invalid_argument("Barlow Twins streams must be [N, d]");
  const std::size_t n = s[0];
  const std::size_t d = s[1];
  std::vector<std::optional<ad::Var>> standardized(streams.size());
  auto z = [&](std::size_t i) {
    if (!standardized[i]) standardized[i] = standardize(streams.at(i), variance_floor);
    return *standardized[i];
  };
  Tensor eye({d, d});
  for (std::size_t k = 0; k < d; ++k) eye.at(k, k) = 1.0;
  ad::Var identity = graph.constant(eye);
  std::optional<ad::Var> total;
  for (const auto& [i, j] : pairs) {
    ad::Var c = ad::scale(ad::matmul(ad::transpose(z(i)), z(j)), 1.0 / static_cast<double>(n));
    ad::Var term = ad::frobenius_sq(c - identity);
    total = total ? *total + term : term;
  }
  BtTerms out;
  out.loss = ad::scale(*total, 1.0 / static_cast<double>(pairs.size()));
  out.pair_evaluations = pairs.size();
  return out;
}

BtTerms bt_loss_full(ad::Graph& graph, const std::vector<ad::Var>& streams,
                     double variance_floor) {
  const auto pairs = all_pairs(streams.size());
  return bt_loss_pairs(graph, streams, pairs, variance_floor);
}

BtTerms bt_loss_randk(ad::Graph& graph, const std::vector<ad::Var>& streams,
                      const RandKConfig& config, Rng& rng, double variance_floor) {
  const auto pairs = sample_pairs(streams.size(), config, rng);
  return bt_loss_pairs(graph, streams, pairs, variance_floor);
}

namespace {

double evaluate_pairs(const FeatureBatch& raw, std::span<const StreamPair> pairs) {
  raw.validate();
  ad::Graph g;
  std::vector<ad::Var> vars;
  ad::Bindings b;
  for (std::size_t i = 0; i < raw.stream_count(); ++i) {
    const std::string name = "z" + std::to_string(i);
    vars.push_back(g.input(name, {raw.rows(), raw.dim()}));
    b[name] = raw.flat(i);
  }
  const BtTerms t = bt_loss_pairs(g, vars, pairs);
  return ad::evaluate(g, b).value(t.loss).item();
}

}  // namespace

double bt_loss_full(const FeatureBatch& raw) {
  if (raw.stream_count() < 2) throw std::invalid_argument("Barlow Twins loss needs P >= 2");
  return evaluate_pairs(raw, all_pairs(raw.stream_count()));
}

double bt_loss_randk(const FeatureBatch& raw, const RandKConfig& config, Rng& rng) {
  if (raw.stream_count() < 2) throw std::invalid_argument("Barlow Twins loss needs P >= 2");
  return evaluate_pairs(raw, sample_pairs(raw.stream_count(), config, rng));
}

double bt_loss_randk(const FeatureBatch& raw, const RandKConfig& config) {
  Rng rng(config.seed);
  return bt_loss_randk(raw, config, rng);
}

void write_diversity_trace_csv(const std::filesystem::path& path,
                               std::span<const DiversityTraceRow> rows) {
  CsvWriter csv(path, {"step", "d_spec", "bt_loss", "mode"});
  for (const auto& r : rows) {
    csv.cell(r.step).cell(r.d_spec).cell(r.bt_loss).cell(std::string(to_string(r.mode))).end_row();
  }
}

}  // namespace ndlab::diversity
