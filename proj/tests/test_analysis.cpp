#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "support.hpp"
#include "wpclip/analysis.hpp"
#include "wpclip/errors.hpp"

using namespace wpclip;
using namespace wpclip::analysis;

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Two well separated groups of score vectors: centres 0.1 and 0.9, sigma 0.05.
void blobs(std::size_t per_group, std::uint64_t seed, std::vector<ScoreVector>& vecs,
           std::vector<std::string>& labels) {
  Rng rng(seed);
  for (std::size_t i = 0; i < 2 * per_group; ++i) {
    const bool high = i % 2;
    std::array<double, kNumPrinciples> v{};
    for (double& x : v) x = clamp01((high ? 0.9 : 0.1) + 0.05 * rng.normal());
    vecs.emplace_back(v);
    labels.push_back(high ? "high" : "low");
  }
}

TsneConfig small_config(std::uint64_t seed = 1) {
  TsneConfig c;
  c.perplexity = 15;
  c.iterations = 500;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Aggregate, HandComputedMeansAndPopulationStd) {
  const std::vector<LabeledScore> s = {{"b", ScoreVector({0.2, 0, 0, 0, 1})},
                                       {"a", ScoreVector({0.5, 0, 0, 0, 0})},
                                       {"b", ScoreVector({0.6, 0, 0, 0, 0})}};
  const auto agg = aggregate_by_group(s);
  ASSERT_EQ(agg.size(), 2u);
  EXPECT_EQ(agg[0].label, "a");
  EXPECT_EQ(agg[0].n, 1u);
  EXPECT_EQ(agg[0].std[0], 0.0);
  EXPECT_EQ(agg[1].label, "b");
  EXPECT_NEAR(agg[1].mean[Principle::LinearPainterly], 0.4, 1e-15);
  EXPECT_NEAR(agg[1].std[0], 0.2, 1e-15);
  EXPECT_NEAR(agg[1].std[4], 0.5, 1e-15);
  EXPECT_THROW(aggregate_by_group({}), InputError);
}

TEST(AggregateProperty, MatchesOracleAndIgnoresOrder) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LabeledScore> s;
    const std::size_t n = 1 + rng.below(60);
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back({"g" + std::to_string(rng.below(4)), test::random_scores(rng)});
    }
    const auto agg = aggregate_by_group(s);
    for (const auto& g : agg) {
      for (std::size_t k = 0; k < kNumPrinciples; ++k) {
        double sum = 0, sq = 0, cnt = 0;
        for (const auto& [label, v] : s) {
          if (label == g.label) sum += v.at(k), cnt += 1;
        }
        const double m = sum / cnt;
        for (const auto& [label, v] : s) {
          if (label == g.label) sq += (v.at(k) - m) * (v.at(k) - m);
        }
        ASSERT_EQ(g.n, std::size_t(cnt));
        ASSERT_NEAR(g.mean.at(k), m, 1e-12);
        ASSERT_NEAR(g.std[k], std::sqrt(sq / cnt), 1e-12);
      }
    }
    auto shuffled = s;
    rng.shuffle(std::span(shuffled));
    const auto again = aggregate_by_group(shuffled);
    ASSERT_EQ(again.size(), agg.size());
    for (std::size_t i = 0; i < agg.size(); ++i) {
      ASSERT_EQ(again[i].mean, agg[i].mean);  // bitwise equal
      ASSERT_EQ(again[i].std, agg[i].std);
    }
  }
}

TEST(Rank, AscendingWithLabelTiebreak) {
  std::vector<LabeledScore> s = {{"Rococo", ScoreVector({0.7, 0, 0, 0, 0})},
                                 {"Baroque", ScoreVector({0.7, 0, 0, 0, 0})},
                                 {"Renaissance", ScoreVector({0.2, 0, 0, 0, 0})}};
  const auto agg = aggregate_by_group(s);
  EXPECT_EQ(rank_groups(agg, Principle::LinearPainterly),
            (std::vector<std::string>{"Renaissance", "Baroque", "Rococo"}));
  std::reverse(s.begin(), s.end());
  EXPECT_EQ(rank_groups(aggregate_by_group(s), Principle::LinearPainterly),
            (std::vector<std::string>{"Renaissance", "Baroque", "Rococo"}));
}

TEST(Tsne, DeterministicForSeed) {
  Rng rng(3);
  std::vector<ScoreVector> v;
  std::vector<std::string> labels;
  for (int i = 0; i < 500; ++i) {
    v.push_back(test::random_scores(rng));
    labels.push_back(i % 3 ? "x" : "y");
  }
  TsneConfig cfg;
  cfg.iterations = 300;
  cfg.seed = 4;
  const auto a = tsne_project(v, labels, cfg), b = tsne_project(v, labels, cfg);
  EXPECT_EQ(a.coords, b.coords);
  EXPECT_EQ(a.method, "exact");
  EXPECT_EQ(a.size(), 500u);
  cfg.seed = 5;
  EXPECT_NE(tsne_project(v, labels, cfg).coords, a.coords);
  for (double c : a.coords) ASSERT_TRUE(std::isfinite(c));
  EXPECT_GT(a.kl_divergence, 0.0);
}

TEST(Tsne, SeparatesBlobsAndShuffledLabelsScoreNearZero) {
  std::vector<ScoreVector> v;
  std::vector<std::string> labels;
  blobs(100, 6, v, labels);
  const auto r = tsne_project(v, labels, small_config());
  EXPECT_GT(cluster_separation(r.coords, r.dims, r.labels), 0.5);
  auto shuffled = r.labels;
  Rng rng(7);
  rng.shuffle(std::span(shuffled));
  EXPECT_LT(std::abs(cluster_separation(r.coords, r.dims, shuffled)), 0.1);
}

TEST(Tsne, PermutingInputsPermutesOutputs) {
  std::vector<ScoreVector> v;
  std::vector<std::string> labels;
  blobs(30, 8, v, labels);
  const auto cfg = small_config(2);
  const auto base = tsne_project(v, labels, cfg);
  std::vector<std::size_t> perm(v.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(9);
  rng.shuffle(std::span(perm));
  std::vector<ScoreVector> pv;
  std::vector<std::string> pl;
  for (auto i : perm) pv.push_back(v[i]), pl.push_back(labels[i]);
  const auto moved = tsne_project(pv, pl, cfg);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    for (int d = 0; d < 2; ++d) ASSERT_EQ(moved.at(k, d), base.at(perm[k], d));
    ASSERT_EQ(moved.labels[k], pl[k]);
  }
}

TEST(Tsne, ThreeDimensionsAndBarnesHut) {
  std::vector<ScoreVector> v;
  std::vector<std::string> labels;
  blobs(60, 10, v, labels);
  auto cfg = small_config(3);
  cfg.dims = 3;
  const auto r3 = tsne_project(v, labels, cfg);
  EXPECT_EQ(r3.coords.size(), v.size() * 3);
  EXPECT_GT(cluster_separation(r3.coords, 3, r3.labels), 0.5);

  cfg.dims = 2;
  cfg.method = TsneMethod::BarnesHut;
  const auto bh = tsne_project(v, labels, cfg);
  EXPECT_EQ(bh.method, "barnes_hut");
  EXPECT_EQ(bh.coords, tsne_project(v, labels, cfg).coords);
  EXPECT_GT(cluster_separation(bh.coords, 2, bh.labels), 0.5);

  cfg.method = TsneMethod::Auto;
  cfg.exact_limit = 50;
  EXPECT_EQ(tsne_project(v, labels, cfg).method, "barnes_hut");
}

TEST(Tsne, ConfigErrors) {
  std::vector<ScoreVector> v(30);
  std::vector<std::string> labels(30, "a");
  TsneConfig cfg;  // perplexity 30 needs more than 90 points
  EXPECT_THROW(tsne_project(v, labels, cfg), ConfigError);
  cfg.perplexity = 5;
  cfg.dims = 4;
  EXPECT_THROW(tsne_project(v, labels, cfg), ConfigError);
  cfg.dims = 2;
  std::vector<std::string> short_labels(3, "a");
  EXPECT_THROW(tsne_project(v, short_labels, cfg), Error);
  const auto j = cfg.to_json();
  EXPECT_EQ(j.at("perplexity"), 5.0);
}

TEST(Silhouette, HandComputedAndDegenerate) {
  // 1D points: a = {0, 1}, b = {5, 6}.
  const double coords[] = {0, 0, 1, 0, 5, 0, 6, 0};
  const std::vector<std::string> labels = {"a", "a", "b", "b"};
  // Point 0: a=1, b=(5+6)/2=5.5 -> 1 - 1/5.5; point 1: a=1, b=4.5 -> 1 - 1/4.5; symmetric.
  const double expected = ((1 - 1 / 5.5) + (1 - 1 / 4.5)) / 2;
  EXPECT_NEAR(cluster_separation(coords, 2, labels), expected, 1e-12);

  const std::vector<std::string> one_label(4, "a");
  EXPECT_THROW(cluster_separation(coords, 2, one_label), DomainError);
  const std::vector<std::string> singleton = {"a", "a", "a", "b"};
  EXPECT_THROW(cluster_separation(coords, 2, singleton), DomainError);
  const double same[] = {1, 1, 1, 1, 1, 1, 1, 1};
  EXPECT_THROW(cluster_separation(same, 2, labels), DomainError);
}

TEST(Writers, AggregatesAndProjectionCsv) {
  const std::vector<LabeledScore> s = {{"a", ScoreVector({0.5, 0.5, 0.5, 0.5, 0.5})}};
  std::ostringstream out;
  write_aggregates_csv(out, aggregate_by_group(s));
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')),
            "label,n,mean_linear_painterly,mean_closed_open,mean_absolute_relative,"
            "mean_planar_recessional,mean_multiplicity_unity,std_linear_painterly,std_closed_open,"
            "std_absolute_relative,std_planar_recessional,std_multiplicity_unity");
  EXPECT_NE(out.str().find("a,1,0.5,"), std::string::npos);

  ProjectionResult r;
  r.coords = {1.5, -2};
  r.labels = {"x"};
  std::ostringstream p;
  const std::vector<std::string> ids = {"id0"};
  write_projection_csv(p, r, ids);
  EXPECT_EQ(p.str(), "id,label,x,y\nid0,x,1.5,-2\n");
}
