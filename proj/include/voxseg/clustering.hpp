#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "voxseg/grid.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

struct ClusterParams {
  std::size_t n_clusters = 2;   ///< k (KM), n (GMM), c (FCM/SDWFCM)
  std::size_t f_select = 1;     ///< number of most intense clusters labeled tumor
  double fuzziness_m = 2.0;     ///< FCM/SDWFCM only
  double spatial_lambda = 0.5;  ///< SDWFCM spatial weight
  std::size_t neighborhood_nb = 1;  ///< SDWFCM membership smoothing radius
  std::size_t max_iter = 200;
  double tol = 1e-6;  ///< on max center shift

  void validate() const {
    if (n_clusters < 1) throw ParameterError("n_clusters must be >= 1");
    if (f_select < 1 || f_select > n_clusters) throw ParameterError("f_select must be in [1, n_clusters]");
    if (!(spatial_lambda >= 0.0 && spatial_lambda <= 1.0)) throw ParameterError("spatial_lambda must be in [0, 1]");
    if (!(tol >= 0.0)) throw ParameterError("tol must be >= 0");
  }
  void validate_fuzzy() const {
    validate();
    if (n_clusters < 2) throw ParameterError("fuzzy clustering needs n_clusters >= 2");
    if (!(fuzziness_m > 1.0)) throw ParameterError("fuzziness_m must be > 1");
  }
};

/// Row-major points x clusters matrix of coefficients; rows sum to 1.
class Membership {
 public:
  Membership() = default;
  Membership(std::size_t n_points, std::size_t n_clusters)
      : n_points_(n_points), n_clusters_(n_clusters), u_(n_points * n_clusters, 0.0) {}

  std::size_t n_points() const { return n_points_; }
  std::size_t n_clusters() const { return n_clusters_; }
  double& operator()(std::size_t point, std::size_t cluster) { return u_[point * n_clusters_ + cluster]; }
  double operator()(std::size_t point, std::size_t cluster) const { return u_[point * n_clusters_ + cluster]; }
  std::span<double> row(std::size_t point) { return {u_.data() + point * n_clusters_, n_clusters_}; }
  std::span<const double> row(std::size_t point) const { return {u_.data() + point * n_clusters_, n_clusters_}; }
  std::vector<double>& values() { return u_; }
  const std::vector<double>& values() const { return u_; }

  /// Argmax per row, ties to the lower cluster index.
  std::vector<std::uint32_t> hard_labels() const {
    std::vector<std::uint32_t> out(n_points_);
    for (std::size_t j = 0; j < n_points_; ++j) {
      const auto r = row(j);
      out[j] = static_cast<std::uint32_t>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
  }

 private:
  std::size_t n_points_ = 0;
  std::size_t n_clusters_ = 0;
  std::vector<double> u_;
};

struct ClusterResult {
  std::vector<double> centers;           ///< per-cluster intensity (GMM: component means)
  std::optional<Membership> membership;  ///< fuzzy methods and GMM responsibilities
  std::vector<std::uint32_t> labels;     ///< hard assignment per point
  /// Per-iteration objective, normalized per point: KM within-cluster SS,
  /// GMM mean log-likelihood, FCM/SDWFCM objective J_m.
  std::vector<double> objective_trace;
  bool converged = false;
  std::size_t iterations = 0;
};

namespace detail {

inline void require_distinct(std::span<const double> x, std::size_t k) {
  std::unordered_set<double> seen;
  for (double v : x) {
    seen.insert(v);
    if (seen.size() >= k) return;
  }
  throw DegenerateInputError("input has fewer than " + std::to_string(k) + " distinct values");
}

inline std::uint32_t nearest_center(double v, const std::vector<double>& centers) {
  std::uint32_t best = 0;
  double best_d = std::abs(v - centers[0]);
  for (std::uint32_t i = 1; i < centers.size(); ++i) {
    const double d = std::abs(v - centers[i]);
    if (d < best_d) { best_d = d; best = i; }
  }
  return best;
}

}  // namespace detail

/// Greedy k-means++ seeding on scalar data: each new center is the best of
/// 2 + floor(ln k) D^2-weighted candidates by reduction of the potential.
inline std::vector<double> kmeanspp_centers(std::span<const double> x, std::size_t k, std::uint64_t seed) {
  detail::require_distinct(x, k);
  Rng rng(seed);
  const std::size_t n = x.size();
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<double> centers{x[rng.below(n)]};
  std::vector<double> d2(n), cand_d2(n), best_d2(n);
  for (std::size_t j = 0; j < n; ++j) d2[j] = (x[j] - centers[0]) * (x[j] - centers[0]);
  double potential = std::accumulate(d2.begin(), d2.end(), 0.0);
  while (centers.size() < k) {
    double best_potential = std::numeric_limits<double>::infinity();
    std::size_t best_pick = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const double target = rng.uniform() * potential;
      double run = 0.0;
      std::size_t pick = n - 1;
      for (std::size_t j = 0; j < n; ++j) {
        run += d2[j];
        if (run > target && d2[j] > 0.0) { pick = j; break; }
      }
      // Rounding can land on a zero-weight tail; step back to a live point.
      while (d2[pick] == 0.0) pick = (pick + n - 1) % n;
      double pot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        cand_d2[j] = std::min(d2[j], (x[j] - x[pick]) * (x[j] - x[pick]));
        pot += cand_d2[j];
      }
      if (pot < best_potential) {
        best_potential = pot;
        best_pick = pick;
        best_d2.swap(cand_d2);
      }
    }
    centers.push_back(x[best_pick]);
    d2.swap(best_d2);
    best_d2.resize(n);
    potential = best_potential;
  }
  return centers;
}

/// Lloyd iterations on scalar intensities.
inline ClusterResult kmeans(std::span<const double> x, const ClusterParams& p, std::uint64_t seed) {
  p.validate();
  const std::size_t k = p.n_clusters;
  ClusterResult r;
  r.centers = kmeanspp_centers(x, k, seed);
  const std::size_t n = x.size();
  std::vector<std::uint32_t> labels(n);
  for (std::size_t j = 0; j < n; ++j) labels[j] = detail::nearest_center(x[j], r.centers);

  std::vector<double> sum(k);
  std::vector<std::size_t> count(k);
  for (std::size_t it = 0; it < p.max_iter; ++it) {
    std::fill(count.begin(), count.end(), 0);
    for (auto l : labels) ++count[l];
    // Empty clusters take over the point farthest from its own center.
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] != 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = std::abs(x[j] - r.centers[labels[j]]);
        if (count[labels[j]] > 1 && d > far_d) { far_d = d; far = j; }
      }
      --count[labels[far]];
      labels[far] = static_cast<std::uint32_t>(c);
      count[c] = 1;
      r.centers[c] = x[far];
    }
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) sum[labels[j]] += x[j];
    for (std::size_t c = 0; c < k; ++c) r.centers[c] = sum[c] / static_cast<double>(count[c]);
    double wcss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[j] - r.centers[labels[j]];
      wcss += d * d;
    }
    r.objective_trace.push_back(wcss / static_cast<double>(n));
    r.iterations = it + 1;

    bool changed = false;
    for (std::size_t j = 0; j < n; ++j) {
      const auto l = detail::nearest_center(x[j], r.centers);
      if (l != labels[j]) { labels[j] = l; changed = true; }
    }
    if (!changed) { r.converged = true; break; }
  }
  r.labels = std::move(labels);
  return r;
}

/// Scalar Gaussian mixture parameters.
struct GaussianMixture1D {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> variances;
};

/// One EM iteration. Returns the updated mixture; `mean_loglik` receives the
/// per-point log-likelihood of the input mixture.
inline GaussianMixture1D gmm_em_step(std::span<const double> x, const GaussianMixture1D& g, double var_floor,
                                     double* mean_loglik = nullptr, Membership* resp_out = nullptr) {
  const std::size_t k = g.means.size();
  const std::size_t n = x.size();
  constexpr double log_2pi = 1.8378770664093453;
  std::vector<double> log_norm(k);
  for (std::size_t c = 0; c < k; ++c) log_norm[c] = std::log(g.weights[c]) - 0.5 * (log_2pi + std::log(g.variances[c]));

  std::vector<double> nk(k, 0.0), sx(k, 0.0), sxx(k, 0.0), lp(k);
  std::vector<double> resp(n * k);
  double ll = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double d = x[j] - g.means[c];
      lp[c] = log_norm[c] - 0.5 * d * d / g.variances[c];
      mx = std::max(mx, lp[c]);
    }
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(lp[c] - mx);
    const double lse = mx + std::log(s);
    ll += lse;
    for (std::size_t c = 0; c < k; ++c) {
      const double rc = std::exp(lp[c] - lse);
      resp[j * k + c] = rc;
      nk[c] += rc;
      sx[c] += rc * x[j];
    }
  }
  if (resp_out) resp_out->values() = resp;
  GaussianMixture1D out = g;
  for (std::size_t c = 0; c < k; ++c)
    if (nk[c] > 0.0) out.means[c] = sx[c] / nk[c];
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < k; ++c) {
      const double d = x[j] - out.means[c];
      sxx[c] += resp[j * k + c] * d * d;
    }
  for (std::size_t c = 0; c < k; ++c) {
    out.weights[c] = nk[c] / static_cast<double>(n);
    out.variances[c] = nk[c] > 0.0 ? std::max(sxx[c] / nk[c], var_floor) : var_floor;
    if (out.weights[c] <= 0.0) out.weights[c] = std::numeric_limits<double>::min();
  }
  if (mean_loglik) *mean_loglik = ll / static_cast<double>(n);
  return out;
}

inline double gmm_variance_floor(std::span<const double> x) {
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  return 1e-6 * (*hi - *lo) * (*hi - *lo);
}

/// EM fit of a scalar Gaussian mixture, initialized from k-means.
inline ClusterResult gmm_em(std::span<const double> x, const ClusterParams& p, std::uint64_t seed,
                            GaussianMixture1D* fitted = nullptr) {
  p.validate();
  const std::size_t k = p.n_clusters;
  const std::size_t n = x.size();
  if (n < k) throw DegenerateInputError("GMM needs at least n_clusters samples");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  if (!(var > 0.0)) throw DegenerateInputError("GMM input has zero variance");
  const double floor = gmm_variance_floor(x);

  const ClusterResult init = kmeans(x, p, derive_seed(seed, "gmm-init"));
  GaussianMixture1D g;
  g.means = init.centers;
  g.weights.assign(k, 0.0);
  g.variances.assign(k, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const auto l = init.labels[j];
    g.weights[l] += 1.0;
    g.variances[l] += (x[j] - g.means[l]) * (x[j] - g.means[l]);
  }
  for (std::size_t c = 0; c < k; ++c) {
    g.variances[c] = std::max(g.variances[c] / g.weights[c], floor);
    g.weights[c] /= static_cast<double>(n);
  }

  ClusterResult r;
  for (std::size_t it = 0; it < p.max_iter; ++it) {
    double ll = 0.0;
    GaussianMixture1D next = gmm_em_step(x, g, floor, &ll);
    r.objective_trace.push_back(ll);
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, std::abs(next.means[c] - g.means[c]));
    g = std::move(next);
    r.iterations = it + 1;
    if (shift < p.tol) { r.converged = true; break; }
  }
  Membership resp(n, k);
  gmm_em_step(x, g, floor, nullptr, &resp);
  r.centers = g.means;
  r.labels = resp.hard_labels();
  r.membership = std::move(resp);
  if (fitted) *fitted = g;
  return r;
}

/// Grid geometry for the spatially weighted variant.
struct SpatialContext {
  Extent3 dims;
  double lambda = 0.0;
  std::size_t nb = 0;
};

namespace detail {

// u_i = 1 / sum_k (D_i / D_k)^(2/(m-1)); a zero distance takes membership 1.
inline void memberships_from_distances(std::span<const double> dist, double m, std::span<double> u) {
  const std::size_t c = dist.size();
  std::size_t zero = c;
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < c; ++i) {
    if (dist[i] == 0.0 && zero == c) zero = i;
    dmin = std::min(dmin, dist[i]);
  }
  if (zero != c) {
    for (std::size_t i = 0; i < c; ++i) u[i] = i == zero ? 1.0 : 0.0;
    return;
  }
  const double e = 2.0 / (m - 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double r = dmin / dist[i];
    u[i] = e == 2.0 ? r * r : std::pow(r, e);
    s += u[i];
  }
  for (std::size_t i = 0; i < c; ++i) u[i] /= s;
}

inline double pow_m(double u, double m) { return m == 2.0 ? u * u : std::pow(u, m); }

// Separable (2nb+1)^3 box mean with replicate borders on one cluster's field.
inline void box_mean(std::vector<double>& f, const Extent3& d, std::size_t nb) {
  const auto r = static_cast<std::ptrdiff_t>(nb);
  const double inv = 1.0 / static_cast<double>(2 * nb + 1);
  std::vector<double> tmp(f.size());
  for (int axis = 2; axis >= 0; --axis) {
    const std::size_t n = d[axis];
    const std::size_t step = axis == 0 ? d.y * d.x : axis == 1 ? d.x : 1;
    for (std::size_t idx = 0; idx < f.size(); ++idx) {
      const std::size_t pos = (idx / step) % n;
      const std::size_t line0 = idx - pos * step;
      double s = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        const auto q = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(pos) + t, 0, static_cast<std::ptrdiff_t>(n) - 1);
        s += f[line0 + static_cast<std::size_t>(q) * step];
      }
      tmp[idx] = s * inv;
    }
    f.swap(tmp);
  }
}

inline void smooth_memberships(Membership& u, const Extent3& d, std::size_t nb) {
  const std::size_t c = u.n_clusters(), n = u.n_points();
  std::vector<double> field(n);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < n; ++j) field[j] = u(j, i);
    box_mean(field, d, nb);
    for (std::size_t j = 0; j < n; ++j) u(j, i) = field[j];
  }
  for (std::size_t j = 0; j < n; ++j) {
    auto row = u.row(j);
    double s = 0.0;
    for (double v : row) s += v;
    for (double& v : row) v /= s;
  }
}

// Shared FCM / SDWFCM loop. With `spatial` null this is plain FCM.
inline ClusterResult fuzzy_loop(std::span<const double> x, const ClusterParams& p, std::vector<double> centers,
                                const SpatialContext* spatial) {
  const std::size_t n = x.size();
  const std::size_t c = centers.size();
  const double m = p.fuzziness_m;
  Membership u(n, c);
  std::vector<double> dist(c);
  std::vector<double> weight(n * c, 1.0);

  auto distances = [&](std::size_t j, const std::vector<double>& v) {
    for (std::size_t i = 0; i < c; ++i) dist[i] = std::abs(x[j] - v[i]) * weight[j * c + i];
  };

  for (std::size_t j = 0; j < n; ++j) {
    distances(j, centers);
    memberships_from_distances(dist, m, u.row(j));
  }

  double diag = 1.0;
  if (spatial) {
    const auto& d = spatial->dims;
    const double dz = static_cast<double>(d.z) - 1.0, dy = static_cast<double>(d.y) - 1.0, dx = static_cast<double>(d.x) - 1.0;
    diag = std::sqrt(dz * dz + dy * dy + dx * dx);
    if (diag == 0.0) diag = 1.0;
  }

  ClusterResult r;
  for (std::size_t it = 0; it < p.max_iter; ++it) {
    if (spatial) {
      const auto& d = spatial->dims;
      // Spatial centroid of each cluster, membership^m weighted.
      std::vector<double> wz(c, 0.0), wy(c, 0.0), wx(c, 0.0), ws(c, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double pz = static_cast<double>(j / (d.y * d.x));
        const double py = static_cast<double>((j / d.x) % d.y);
        const double px = static_cast<double>(j % d.x);
        for (std::size_t i = 0; i < c; ++i) {
          const double w = pow_m(u(j, i), m);
          ws[i] += w;
          wz[i] += w * pz;
          wy[i] += w * py;
          wx[i] += w * px;
        }
      }
      for (std::size_t i = 0; i < c; ++i) {
        wz[i] /= ws[i];
        wy[i] /= ws[i];
        wx[i] /= ws[i];
      }
      const double lam = spatial->lambda;
      for (std::size_t j = 0; j < n; ++j) {
        const double pz = static_cast<double>(j / (d.y * d.x));
        const double py = static_cast<double>((j / d.x) % d.y);
        const double px = static_cast<double>(j % d.x);
        for (std::size_t i = 0; i < c; ++i) {
          const double s = std::sqrt((pz - wz[i]) * (pz - wz[i]) + (py - wy[i]) * (py - wy[i]) +
                                     (px - wx[i]) * (px - wx[i])) / diag;
          weight[j * c + i] = (1.0 - lam) + lam * s;
        }
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      distances(j, centers);
      memberships_from_distances(dist, m, u.row(j));
    }
    if (spatial && spatial->nb > 0) smooth_memberships(u, spatial->dims, spatial->nb);

    std::vector<double> num(c, 0.0), den(c, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < c; ++i) {
        const double w = pow_m(u(j, i), m);
        num[i] += w * x[j];
        den[i] += w;
      }
    double shift = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double v = num[i] / den[i];
      shift = std::max(shift, std::abs(v - centers[i]));
      centers[i] = v;
    }
    double obj = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      distances(j, centers);
      for (std::size_t i = 0; i < c; ++i) obj += pow_m(u(j, i), m) * dist[i] * dist[i];
    }
    r.objective_trace.push_back(obj / static_cast<double>(n));
    r.iterations = it + 1;
    if (shift < p.tol) { r.converged = true; break; }
  }
  r.centers = std::move(centers);
  r.labels = u.hard_labels();
  r.membership = std::move(u);
  return r;
}

}  // namespace detail

/// Fuzzy C-Means from explicit initial centers.
inline ClusterResult fcm_from_centers(std::span<const double> x, const ClusterParams& p, std::vector<double> centers) {
  p.validate_fuzzy();
  if (centers.size() != p.n_clusters) throw ParameterError("initial center count must equal n_clusters");
  return detail::fuzzy_loop(x, p, std::move(centers), nullptr);
}

inline ClusterResult fcm(std::span<const double> x, const ClusterParams& p, std::uint64_t seed) {
  p.validate_fuzzy();
  return fcm_from_centers(x, p, kmeanspp_centers(x, p.n_clusters, seed));
}

inline std::vector<double> flatten(const Volume3& v) { return {v.data().begin(), v.data().end()}; }

/// Spatial-distance-weighted FCM from explicit initial centers.
inline ClusterResult sdwfcm_from_centers(const Volume3& volume, const ClusterParams& p, std::vector<double> centers) {
  p.validate_fuzzy();
  if (centers.size() != p.n_clusters) throw ParameterError("initial center count must equal n_clusters");
  const auto x = flatten(volume);
  const SpatialContext ctx{volume.dims(), p.spatial_lambda, p.neighborhood_nb};
  return detail::fuzzy_loop(x, p, std::move(centers), &ctx);
}

inline ClusterResult sdwfcm(const Volume3& volume, const ClusterParams& p, std::uint64_t seed) {
  p.validate_fuzzy();
  const auto x = flatten(volume);
  return sdwfcm_from_centers(volume, p, kmeanspp_centers(x, p.n_clusters, seed));
}

/// Tumor mask from the f clusters with highest center intensity.
inline BinaryMask3 select_tumor_clusters(const ClusterResult& r, std::size_t f, const Extent3& dims,
                                         Spacing3 spacing = {}) {
  const std::size_t k = r.centers.size();
  if (f < 1 || f > k) throw ParameterError("f_select must be in [1, n_clusters]");
  if (r.labels.size() != dims.voxel_count()) throw DimensionError("label count does not match mask dims " + dims.str());
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r.centers[a] > r.centers[b]; });
  std::vector<std::uint8_t> selected(k, 0);
  for (std::size_t i = 0; i < f; ++i) selected[order[i]] = 1;
  BinaryMask3 mask(dims, spacing);
  for (std::size_t j = 0; j < r.labels.size(); ++j) mask[j] = selected[r.labels[j]];
  return mask;
}

}  // namespace voxseg
