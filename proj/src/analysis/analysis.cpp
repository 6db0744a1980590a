#include "wpclip/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

#include "wpclip/csv.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/rng.hpp"

namespace wpclip::analysis {

namespace {

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Calibration of the input affinities.

// Conditional probabilities for one point given squared distances to its
// candidate neighbours; binary search on the precision so the entropy (nats)
// matches log(perplexity).
void calibrate_row(std::span<const double> d2, double perplexity, std::span<double> out) {
  const double target = std::log(perplexity);
  double dmin = std::numeric_limits<double>::infinity();
  for (double d : d2) dmin = std::min(dmin, d);
  double beta = 1.0, lo = -std::numeric_limits<double>::infinity(),
         hi = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 200; ++iter) {
    double sum = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < d2.size(); ++j) {
      out[j] = std::exp(-beta * (d2[j] - dmin));
      sum += out[j];
      weighted += (d2[j] - dmin) * out[j];
    }
    const double h = std::log(sum) + beta * weighted / sum;
    for (double& p : out) p /= sum;
    const double diff = h - target;
    if (std::abs(diff) < 1e-5) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = std::isinf(lo) ? beta / 2.0 : 0.5 * (beta + lo);
    }
  }
}

double sq_dist(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int k = 0; k < d; ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

// Symmetric sparse affinities in CSR form.
struct SparseP {
  std::vector<std::size_t> row_ptr;
  std::vector<std::size_t> col;
  std::vector<double> val;
};

std::vector<double> exact_affinities(const std::vector<double>& x, std::size_t n, double perplexity) {
  constexpr int kIn = int(kNumPrinciples);
  std::vector<double> p(n * n, 0.0);
  std::vector<double> d2(n - 1), row(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0, k = 0; j < n; ++j) {
      if (j != i) d2[k++] = sq_dist(&x[i * kIn], &x[j * kIn], kIn);
    }
    calibrate_row(d2, perplexity, row);
    for (std::size_t j = 0, k = 0; j < n; ++j) {
      if (j != i) p[i * n + j] = row[k++];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = std::max((p[i * n + j] + p[j * n + i]) / (2.0 * double(n)), 1e-12);
      p[i * n + j] = p[j * n + i] = s;
    }
  }
  return p;
}

SparseP knn_affinities(const std::vector<double>& x, std::size_t n, double perplexity) {
  constexpr int kIn = int(kNumPrinciples);
  const std::size_t k = std::min(n - 1, std::size_t(3.0 * perplexity));
  std::vector<std::tuple<std::size_t, std::size_t, double>> triplets;
  triplets.reserve(2 * n * k);
  std::vector<std::pair<double, std::size_t>> cand(n - 1);
  std::vector<double> d2(k), row(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0, c = 0; j < n; ++j) {
      if (j != i) cand[c++] = {sq_dist(&x[i * kIn], &x[j * kIn], kIn), j};
    }
    std::partial_sort(cand.begin(), cand.begin() + std::ptrdiff_t(k), cand.end());
    for (std::size_t c = 0; c < k; ++c) d2[c] = cand[c].first;
    calibrate_row(d2, perplexity, row);
    for (std::size_t c = 0; c < k; ++c) {
      triplets.emplace_back(i, cand[c].second, row[c]);
      triplets.emplace_back(cand[c].second, i, row[c]);
    }
  }
  std::sort(triplets.begin(), triplets.end());
  SparseP p;
  p.row_ptr.assign(n + 1, 0);
  for (std::size_t t = 0; t < triplets.size();) {
    const auto [i, j, v0] = triplets[t];
    double v = 0.0;
    while (t < triplets.size() && std::get<0>(triplets[t]) == i && std::get<1>(triplets[t]) == j) {
      v += std::get<2>(triplets[t]);
      ++t;
    }
    p.col.push_back(j);
    p.val.push_back(v / (2.0 * double(n)));
    ++p.row_ptr[i + 1];
  }
  for (std::size_t i = 0; i < n; ++i) p.row_ptr[i + 1] += p.row_ptr[i];
  return p;
}

// ---------------------------------------------------------------------------
// Space-partitioning tree (quadtree in 2-D, octree in 3-D) for the
// Barnes-Hut approximation of the repulsive forces.

class SpTree {
 public:
  SpTree(const std::vector<double>& y, std::size_t n, int dims) : y_(y), dims_(dims) {
    std::array<double, 3> lo{}, hi{};
    for (int d = 0; d < dims; ++d) {
      lo[d] = std::numeric_limits<double>::infinity();
      hi[d] = -lo[d];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (int d = 0; d < dims; ++d) {
        lo[d] = std::min(lo[d], y[i * dims + d]);
        hi[d] = std::max(hi[d], y[i * dims + d]);
      }
    }
    Node root;
    for (int d = 0; d < dims; ++d) {
      root.center[d] = 0.5 * (lo[d] + hi[d]);
      root.half[d] = 0.5 * (hi[d] - lo[d]) + 1e-5;
    }
    nodes_.push_back(root);
    for (std::size_t i = 0; i < n; ++i) insert(0, i);
  }

  // Accumulates the unnormalized repulsive force on point i; returns its
  // contribution to the normalization sum.
  double repulsion(std::size_t i, double theta, double* force) const {
    return visit(0, i, theta, force);
  }

 private:
  struct Node {
    std::array<double, 3> center{}, half{}, com{};
    std::size_t count = 0;
    std::vector<std::size_t> points;  // leaf contents, all at one location
    int first_child = -1;
  };

  const double* pt(std::size_t i) const { return &y_[i * std::size_t(dims_)]; }

  bool same_location(std::size_t a, std::size_t b) const {
    for (int d = 0; d < dims_; ++d) {
      if (pt(a)[d] != pt(b)[d]) return false;
    }
    return true;
  }

  int child_for(const Node& node, std::size_t i) const {
    int c = 0;
    for (int d = 0; d < dims_; ++d) {
      if (pt(i)[d] > node.center[d]) c |= 1 << d;
    }
    return node.first_child + c;
  }

  void subdivide(std::size_t idx) {
    const int first = int(nodes_.size());
    const int nchild = 1 << dims_;
    for (int c = 0; c < nchild; ++c) {
      Node child;
      for (int d = 0; d < dims_; ++d) {
        child.half[d] = 0.5 * nodes_[idx].half[d];
        child.center[d] = nodes_[idx].center[d] + ((c >> d) & 1 ? child.half[d] : -child.half[d]);
      }
      nodes_.push_back(child);
    }
    nodes_[idx].first_child = first;
  }

  void insert(std::size_t idx, std::size_t i) {
    for (;;) {
      Node& node = nodes_[idx];
      const double w = 1.0 / double(node.count + 1);
      for (int d = 0; d < dims_; ++d) node.com[d] = (1.0 - w) * node.com[d] + w * pt(i)[d];
      ++node.count;
      if (node.first_child < 0) {
        if (node.points.empty() || same_location(node.points.front(), i)) {
          node.points.push_back(i);
          return;
        }
        // Split the leaf and push its residents one level down.
        auto residents = std::move(node.points);
        node.points.clear();
        subdivide(idx);
        for (std::size_t r : residents) {
          const std::size_t c = std::size_t(child_for(nodes_[idx], r));
          Node& child = nodes_[c];
          const double wr = 1.0 / double(child.count + 1);
          for (int d = 0; d < dims_; ++d) child.com[d] = (1.0 - wr) * child.com[d] + wr * pt(r)[d];
          ++child.count;
          child.points.push_back(r);
        }
      }
      idx = std::size_t(child_for(nodes_[idx], i));
    }
  }

  double visit(std::size_t idx, std::size_t i, double theta, double* force) const {
    const Node& node = nodes_[idx];
    if (node.count == 0) return 0.0;
    double diff[3];
    double d2 = 0.0;
    for (int d = 0; d < dims_; ++d) {
      diff[d] = pt(i)[d] - node.com[d];
      d2 += diff[d] * diff[d];
    }
    const bool leaf = node.first_child < 0;
    double max_half = 0.0;
    for (int d = 0; d < dims_; ++d) max_half = std::max(max_half, node.half[d]);
    if (leaf || (d2 > 0.0 && 2.0 * max_half / std::sqrt(d2) < theta)) {
      double mass = double(node.count);
      if (leaf && std::find(node.points.begin(), node.points.end(), i) != node.points.end()) {
        mass -= 1.0;
      }
      if (mass == 0.0) return 0.0;
      const double q = 1.0 / (1.0 + d2);
      for (int d = 0; d < dims_; ++d) force[d] += mass * q * q * diff[d];
      return mass * q;
    }
    double z = 0.0;
    for (int c = 0; c < (1 << dims_); ++c) z += visit(std::size_t(node.first_child + c), i, theta, force);
    return z;
  }

  const std::vector<double>& y_;
  int dims_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Gradients. Both return the KL divergence when `want_kl` is set.

void exact_gradient(const std::vector<double>& p, double exaggeration, const std::vector<double>& y,
                    std::size_t n, int dims, std::vector<double>& grad, std::vector<double>& num) {
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num[i * n + i] = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double q = 1.0 / (1.0 + sq_dist(&y[i * dims], &y[j * dims], dims));
      num[i * n + j] = num[j * n + i] = q;
      z += 2.0 * q;
    }
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = num[i * n + j];
      const double mult = 4.0 * (exaggeration * p[i * n + j] - q / z) * q;
      for (int d = 0; d < dims; ++d) grad[i * dims + d] += mult * (y[i * dims + d] - y[j * dims + d]);
    }
  }
}

double exact_kl(const std::vector<double>& p, const std::vector<double>& y, std::size_t n, int dims) {
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) z += 1.0 / (1.0 + sq_dist(&y[i * dims], &y[j * dims], dims));
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = 1.0 / (1.0 + sq_dist(&y[i * dims], &y[j * dims], dims)) / z;
      kl += p[i * n + j] * std::log(p[i * n + j] / std::max(q, 1e-300));
    }
  }
  return kl;
}

void bh_gradient(const SparseP& p, double exaggeration, const std::vector<double>& y, std::size_t n,
                 int dims, double theta, std::vector<double>& grad) {
  SpTree tree(y, n, dims);
  std::vector<double> neg(n * dims, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += tree.repulsion(i, theta, &neg[i * dims]);
  std::fill(grad.begin(), grad.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = p.row_ptr[i]; e < p.row_ptr[i + 1]; ++e) {
      const std::size_t j = p.col[e];
      const double q = 1.0 / (1.0 + sq_dist(&y[i * dims], &y[j * dims], dims));
      const double mult = exaggeration * p.val[e] * q;
      for (int d = 0; d < dims; ++d) grad[i * dims + d] += mult * (y[i * dims + d] - y[j * dims + d]);
    }
    for (int d = 0; d < dims; ++d) {
      grad[i * dims + d] = 4.0 * (grad[i * dims + d] - neg[i * dims + d] / z);
    }
  }
}

double bh_kl(const SparseP& p, const std::vector<double>& y, std::size_t n, int dims, double theta) {
  SpTree tree(y, n, dims);
  std::vector<double> scratch(dims);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += tree.repulsion(i, theta, scratch.data());
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = p.row_ptr[i]; e < p.row_ptr[i + 1]; ++e) {
      const double q = 1.0 / (1.0 + sq_dist(&y[i * dims], &y[p.col[e] * dims], dims)) / z;
      kl += p.val[e] * std::log(std::max(p.val[e], 1e-300) / std::max(q, 1e-300));
    }
  }
  return kl;
}

}  // namespace

std::vector<GroupAggregate> aggregate_by_group(std::span<const LabeledScore> scores) {
  if (scores.empty()) throw InputError("aggregate_by_group: no scores given");
  std::map<std::string, std::array<std::vector<double>, kNumPrinciples>> groups;
  for (const auto& [label, sv] : scores) {
    auto& cols = groups[label];
    for (Principle p : kAllPrinciples) cols[index_of(p)].push_back(sv[p]);
  }
  std::vector<GroupAggregate> out;
  out.reserve(groups.size());
  for (auto& [label, cols] : groups) {
    GroupAggregate g;
    g.label = label;
    g.n = cols[0].size();
    std::array<double, kNumPrinciples> mean{};
    for (std::size_t k = 0; k < kNumPrinciples; ++k) {
      mean[k] = std::clamp(sorted_sum(cols[k]) / double(g.n), 0.0, 1.0);
      std::vector<double> sq;
      sq.reserve(g.n);
      for (double v : cols[k]) sq.push_back((v - mean[k]) * (v - mean[k]));
      g.std[k] = std::sqrt(sorted_sum(std::move(sq)) / double(g.n));
    }
    g.mean = ScoreVector(mean);
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<std::string> rank_groups(std::span<const GroupAggregate> aggregates, Principle principle) {
  std::vector<const GroupAggregate*> order;
  for (const auto& a : aggregates) order.push_back(&a);
  std::stable_sort(order.begin(), order.end(), [&](const GroupAggregate* a, const GroupAggregate* b) {
    if (a->mean[principle] != b->mean[principle]) return a->mean[principle] < b->mean[principle];
    return a->label < b->label;
  });
  std::vector<std::string> labels;
  for (const auto* a : order) labels.push_back(a->label);
  return labels;
}

void TsneConfig::validate() const {
  if (dims != 2 && dims != 3) throw ConfigError("t-SNE dims must be 2 or 3, got " + std::to_string(dims));
  if (!(perplexity > 0.0) || !std::isfinite(perplexity)) throw ConfigError("t-SNE perplexity must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("t-SNE learning rate must be nonnegative (0 = auto)");
  if (!(early_exaggeration >= 1.0)) throw ConfigError("t-SNE early exaggeration must be >= 1");
  if (!(theta >= 0.0)) throw ConfigError("t-SNE theta must be >= 0");
}

nlohmann::json TsneConfig::to_json() const {
  nlohmann::ordered_json j;
  j["dims"] = dims;
  j["perplexity"] = perplexity;
  j["iterations"] = iterations;
  j["seed"] = seed;
  j["method"] = method == TsneMethod::Auto ? "auto" : method == TsneMethod::Exact ? "exact" : "barnes_hut";
  j["exact_limit"] = exact_limit;
  j["theta"] = theta;
  j["learning_rate"] = learning_rate;
  j["early_exaggeration"] = early_exaggeration;
  j["exaggeration_iterations"] = exaggeration_iterations;
  return j;
}

ProjectionResult tsne_project(std::span<const ScoreVector> vectors, std::span<const std::string> labels,
                              const TsneConfig& config) {
  config.validate();
  const std::size_t n = vectors.size();
  if (!labels.empty() && labels.size() != n) {
    throw InputError("t-SNE: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " vectors");
  }
  if (double(n) <= 3.0 * config.perplexity) {
    throw ConfigError("t-SNE needs more than 3 * perplexity points (" + std::to_string(n) +
                      " given, perplexity " + fmt17(config.perplexity) + ")");
  }
  const int dims = config.dims;
  const bool exact = config.method == TsneMethod::Exact ||
                     (config.method == TsneMethod::Auto && n <= config.exact_limit);

  // Canonical row order: sorted by value.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return vectors[a].values() < vectors[b].values();
  });
  constexpr std::size_t kIn = kNumPrinciples;
  std::vector<double> x(n * kIn);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& v = vectors[order[r]].values();
    std::copy(v.begin(), v.end(), x.begin() + std::ptrdiff_t(r * kIn));
  }

  Rng rng(derive_seed(config.seed, "tsne.init"));
  std::vector<double> y(n * dims);
  for (double& v : y) v = 1e-4 * rng.normal();

  std::vector<double> p_dense;
  SparseP p_sparse;
  std::vector<double> num;
  if (exact) {
    p_dense = exact_affinities(x, n, config.perplexity);
    num.resize(n * n);
  } else {
    p_sparse = knn_affinities(x, n, config.perplexity);
  }

  const double learning_rate =
      config.learning_rate > 0.0 ? config.learning_rate
                                 : std::max(double(n) / config.early_exaggeration / 4.0, 50.0);
  std::vector<double> grad(n * dims), update(n * dims, 0.0), gains(n * dims, 1.0);
  for (std::size_t iter = 0; iter < config.iterations; ++iter) {
    const bool early = iter < config.exaggeration_iterations;
    const double exaggeration = early ? config.early_exaggeration : 1.0;
    const double momentum = early ? 0.5 : 0.8;
    if (exact) {
      exact_gradient(p_dense, exaggeration, y, n, dims, grad, num);
    } else {
      bh_gradient(p_sparse, exaggeration, y, n, dims, config.theta, grad);
    }
    for (std::size_t k = 0; k < y.size(); ++k) {
      gains[k] = (grad[k] > 0) != (update[k] > 0) ? gains[k] + 0.2 : gains[k] * 0.8;
      gains[k] = std::max(gains[k], 0.01);
      update[k] = momentum * update[k] - learning_rate * gains[k] * grad[k];
      y[k] += update[k];
    }
    for (int d = 0; d < dims; ++d) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += y[i * dims + d];
      mean /= double(n);
      for (std::size_t i = 0; i < n; ++i) y[i * dims + d] -= mean;
    }
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw DomainError("t-SNE diverged (non-finite coordinates)");
  }

  ProjectionResult result;
  result.dims = dims;
  result.params = config;
  result.params.learning_rate = learning_rate;
  result.method = exact ? "exact" : "barnes_hut";
  result.kl_divergence = exact ? exact_kl(p_dense, y, n, dims) : bh_kl(p_sparse, y, n, dims, config.theta);
  result.coords.resize(n * dims);
  for (std::size_t r = 0; r < n; ++r) {
    for (int d = 0; d < dims; ++d) result.coords[order[r] * dims + d] = y[r * dims + d];
  }
  result.labels.assign(labels.begin(), labels.end());
  return result;
}

double cluster_separation(std::span<const double> coords, int dims, std::span<const std::string> labels) {
  if (dims <= 0 || coords.size() != labels.size() * std::size_t(dims)) {
    throw DomainError("silhouette: coordinates and labels are misaligned");
  }
  std::map<std::string, std::size_t> ids;
  for (const auto& l : labels) ids.emplace(l, ids.size());
  std::vector<std::size_t> cluster(labels.size()), sizes(ids.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    cluster[i] = ids.at(labels[i]);
    ++sizes[cluster[i]];
  }
  if (ids.size() < 2) throw DomainError("silhouette needs at least 2 labels");
  for (const auto& [label, id] : ids) {
    if (sizes[id] < 2) throw DomainError("silhouette: label '" + label + "' has fewer than 2 members");
  }
  const std::size_t n = labels.size();
  const std::size_t k = ids.size();
  double total = 0.0;
  bool any_distance = false;
  std::vector<double> sums(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = std::sqrt(sq_dist(&coords[i * dims], &coords[j * dims], dims));
      if (d > 0.0) any_distance = true;
      sums[cluster[j]] += d;
    }
    const double a = sums[cluster[i]] / double(sizes[cluster[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != cluster[i]) b = std::min(b, sums[c] / double(sizes[c]));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  if (!any_distance) throw DomainError("silhouette undefined: all points coincide");
  return total / double(n);
}

void write_aggregates_csv(std::ostream& out, std::span<const GroupAggregate> aggregates) {
  out << "label,n";
  for (Principle p : kAllPrinciples) out << ",mean_" << key(p);
  for (Principle p : kAllPrinciples) out << ",std_" << key(p);
  out << '\n';
  for (const auto& a : aggregates) {
    out << csv::escape(a.label) << ',' << a.n;
    for (Principle p : kAllPrinciples) out << ',' << fmt17(a.mean[p]);
    for (Principle p : kAllPrinciples) out << ',' << fmt17(a.std[index_of(p)]);
    out << '\n';
  }
}

void write_projection_csv(std::ostream& out, const ProjectionResult& result, std::span<const std::string> ids) {
  if (ids.size() != result.size()) throw InputError("projection export: ids misaligned with coordinates");
  static constexpr const char* kAxes[] = {"x", "y", "z"};
  out << "id,label";
  for (int d = 0; d < result.dims; ++d) out << ',' << kAxes[d];
  out << '\n';
  for (std::size_t i = 0; i < result.size(); ++i) {
    out << csv::escape(ids[i]) << ',' << csv::escape(result.labels.empty() ? "" : result.labels[i]);
    for (int d = 0; d < result.dims; ++d) out << ',' << fmt17(result.at(i, d));
    out << '\n';
  }
}

}  // namespace wpclip::analysis
