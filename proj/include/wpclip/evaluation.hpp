#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpclip/core.hpp"
#include "wpclip/errors.hpp"

namespace wpclip::eval {

using PerPrinciple = std::array<double, kNumPrinciples>;

struct MseReport {
  PerPrinciple per_principle{};
  double mean = 0.0;
};

// Per-principle mean squared difference. DomainError when misaligned/empty.
MseReport mse_report(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts);

// 1-based ranks; tied values share their mean rank.
std::vector<double> average_ranks(std::span<const double> values);

// Spearman rank correlation: Pearson correlation of average ranks.
// DomainError for length < 2, unequal lengths, or zero rank variance.
double srcc(std::span<const double> xs, std::span<const double> ys);

PerPrinciple srcc_report(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts);

struct EvalReport {
  PerPrinciple per_principle_mse{};
  double mean_mse = 0.0;
  PerPrinciple per_principle_srcc{};
  std::size_t n = 0;
  std::string checkpoint_id;
  std::string mode;

  nlohmann::json to_json() const;
};

EvalReport evaluate(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts,
                    std::string checkpoint_id, std::string mode);

// Table rows are alphabetical by principle display name:
// principle,mse,srcc
void write_report_table_csv(const EvalReport& report, std::ostream& out);

// ---------------------------------------------------------------------------
// Pairwise protocol

enum class Side { Left, Right };

std::string_view to_string(Side s) noexcept;

// The winner of a pair is the image showing MORE of the principle's low pole
// (e.g. more Linear), i.e. the lower score. This matches the judge question
// "Left painting has more <low pole> style".
struct PairComparison {
  std::string pair_id;
  Principle principle = Principle::LinearPainterly;
  std::string left_id;
  std::string right_id;
  double gt_left = 0.0;   // 1-5 scale
  double gt_right = 0.0;  // 1-5 scale
  Side winner_gt = Side::Left;

  friend bool operator==(const PairComparison&, const PairComparison&) = default;
};

struct DiffStats {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // population (ddof = 0)
};

struct PairSet {
  double threshold = 0.0;
  std::size_t n_per_principle = 0;
  std::uint64_t seed = 0;
  std::vector<PairComparison> pairs;  // grouped by principle in enumeration order
  DiffStats stats;                    // |gt_left - gt_right| over all pairs
  std::array<DiffStats, kNumPrinciples> per_principle_stats{};
  std::array<std::size_t, kNumPrinciples> eligible{};

  nlohmann::json to_json() const;
  static PairSet from_json(const nlohmann::json& j);
};

struct Shortfall {
  Principle principle;
  std::size_t eligible = 0;
  std::size_t requested = 0;
};

class InsufficientPairsError : public InputError {
 public:
  explicit InsufficientPairsError(std::vector<Shortfall> shortfalls);
  const std::vector<Shortfall>& shortfalls() const noexcept { return shortfalls_; }

 private:
  std::vector<Shortfall> shortfalls_;
};

// Two records are eligible for a principle when their 1-5 scale scores differ
// by at least `threshold`. Samples n_per_principle eligible pairs without
// replacement per principle (an image may appear in several pairs) and
// randomizes left/right placement; all of it deterministic in `seed`.
PairSet build_pair_sets(std::span<const AnnotationRecord> records, double threshold,
                        std::size_t n_per_principle, std::uint64_t seed);

// Tie: the comparator could not separate the images (counted incorrect).
// Abstain: no answer at all (e.g. judge failure), tracked separately.
enum class Verdict { Left, Right, Tie, Abstain };

using Comparator = std::function<Verdict(const PairComparison&)>;

struct PrincipleAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t ties = 0;
  std::size_t abstained = 0;
  double percent() const { return total ? 100.0 * double(correct) / double(total) : 0.0; }
};

// Percentages are always recomputed from counts over all pairs.
struct AccuracyTable {
  std::array<PrincipleAccuracy, kNumPrinciples> per_principle{};
  PrincipleAccuracy overall;

  nlohmann::json to_json() const;
};

AccuracyTable pairwise_accuracy(const Comparator& comparator,
                                std::span<const PairComparison> pairs);

// Picks the image with the lower predicted score. Pairs whose predictions
// differ by no more than tie_epsilon are Ties; unknown ids Abstain.
Comparator score_comparator(std::map<std::string, ScoreVector> predictions,
                            double tie_epsilon = 1e-9);

Comparator oracle_comparator();
Comparator anti_oracle_comparator();

}  // namespace wpclip::eval
