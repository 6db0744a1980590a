#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpclip/core.hpp"

namespace wpclip::analysis {

struct GroupAggregate {
  std::string label;
  std::size_t n = 0;
  ScoreVector mean;
  std::array<double, kNumPrinciples> std{};  // population (ddof = 0)
};

using LabeledScore = std::pair<std::string, ScoreVector>;

// One aggregate per distinct label, sorted by label. Values are summed in
// sorted order so the result does not depend on input order at all.
std::vector<GroupAggregate> aggregate_by_group(std::span<const LabeledScore> scores);

// Labels by ascending mean on `principle`; equal means fall back to label order.
std::vector<std::string> rank_groups(std::span<const GroupAggregate> aggregates,
                                     Principle principle);

enum class TsneMethod { Auto, Exact, BarnesHut };

struct TsneConfig {
  int dims = 2;
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  TsneMethod method = TsneMethod::Auto;
  std::size_t exact_limit = 5000;  // Auto uses Barnes-Hut above this many points
  double theta = 0.5;
  double learning_rate = 0.0;  // 0 = max(n / early_exaggeration / 4, 50)
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;

  void validate() const;
  nlohmann::json to_json() const;
};

struct ProjectionResult {
  int dims = 2;
  std::vector<double> coords;  // row-major, n x dims
  std::vector<std::string> labels;
  TsneConfig params;
  std::string method;  // resolved: "exact" or "barnes_hut"
  double kl_divergence = 0.0;

  std::size_t size() const { return dims ? coords.size() / std::size_t(dims) : 0; }
  double at(std::size_t row, int dim) const { return coords[row * std::size_t(dims) + std::size_t(dim)]; }
};

// ConfigError when n <= 3 * perplexity or dims is not 2 or 3. Rows are
// processed in a canonical (sorted) order internally, so permuting the input
// permutes the output rows identically.
ProjectionResult tsne_project(std::span<const ScoreVector> vectors, std::span<const std::string> labels,
                              const TsneConfig& config);

// Mean silhouette with Euclidean distance over row-major n x dims coordinates.
// DomainError unless there are >= 2 labels with >= 2 members each and some
// nonzero distance.
double cluster_separation(std::span<const double> coords, int dims,
                          std::span<const std::string> labels);

void write_aggregates_csv(std::ostream& out, std::span<const GroupAggregate> aggregates);
void write_projection_csv(std::ostream& out, const ProjectionResult& result,
                          std::span<const std::string> ids);

}  // namespace wpclip::analysis
