#include "wpclip/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "wpclip/rng.hpp"

namespace wpclip::eval {

namespace {

void check_aligned(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts) {
  if (preds.size() != gts.size()) {
    throw DomainError("predictions (" + std::to_string(preds.size()) +
                      ") and ground truth (" + std::to_string(gts.size()) + ") misaligned");
  }
  if (preds.empty()) throw DomainError("no samples to evaluate");
}

std::vector<double> column(std::span<const ScoreVector> v, Principle p) {
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(s[p]);
  return out;
}

nlohmann::ordered_json per_principle_json(const PerPrinciple& values) {
  nlohmann::ordered_json j;
  for (Principle p : kAllPrinciples) j[std::string(key(p))] = values[index_of(p)];
  return j;
}

// Principles sorted by display name, the table row order.
std::array<Principle, kNumPrinciples> table_order() {
  auto order = kAllPrinciples;
  std::sort(order.begin(), order.end(),
            [](Principle a, Principle b) { return info(a).display < info(b).display; });
  return order;
}

DiffStats diff_stats(std::span<const PairComparison> pairs) {
  DiffStats s;
  s.n = pairs.size();
  if (pairs.empty()) return s;
  double sum = 0.0;
  for (const auto& p : pairs) sum += std::abs(p.gt_left - p.gt_right);
  s.mean = sum / double(s.n);
  double sq = 0.0;
  for (const auto& p : pairs) {
    const double d = std::abs(p.gt_left - p.gt_right) - s.mean;
    sq += d * d;
  }
  s.std = std::sqrt(sq / double(s.n));
  return s;
}

nlohmann::json stats_json(const DiffStats& s) {
  return {{"n", s.n}, {"mean", s.mean}, {"std", s.std}};
}

DiffStats stats_from_json(const nlohmann::json& j) {
  return {j.at("n").get<std::size_t>(), j.at("mean").get<double>(), j.at("std").get<double>()};
}

// 1-5 scale differences come from unit-scale floats; allow rounding slack.
constexpr double kThresholdSlack = 1e-9;

}  // namespace

MseReport mse_report(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts) {
  check_aligned(preds, gts);
  MseReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (Principle p : kAllPrinciples) {
      const double d = preds[i][p] - gts[i][p];
      r.per_principle[index_of(p)] += d * d;
    }
  }
  for (double& v : r.per_principle) v /= double(preds.size());
  r.mean = std::accumulate(r.per_principle.begin(), r.per_principle.end(), 0.0) / kNumPrinciples;
  return r;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[idx[j]] == values[idx[i]]) ++j;
    // Positions i..j-1 (0-based) share rank mean of (i+1 .. j).
    const double r = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

double srcc(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DomainError("srcc: inputs differ in length");
  if (xs.size() < 2) throw DomainError("srcc: correlation undefined for fewer than 2 samples");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw DomainError("srcc: non-finite input");
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = double(xs.size());
  const double mean = (n + 1.0) / 2.0;  // mean rank is fixed with average ties
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    throw DomainError("srcc: correlation undefined (constant input, zero rank variance)");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

PerPrinciple srcc_report(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts) {
  check_aligned(preds, gts);
  PerPrinciple out{};
  for (Principle p : kAllPrinciples) {
    try {
      out[index_of(p)] = srcc(column(preds, p), column(gts, p));
    } catch (const DomainError& e) {
      throw DomainError(std::string(info(p).display) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["n"] = n;
  j["checkpoint_id"] = checkpoint_id;
  j["mode"] = mode;
  j["per_principle_mse"] = per_principle_json(per_principle_mse);
  j["mean_mse"] = mean_mse;
  j["per_principle_srcc"] = per_principle_json(per_principle_srcc);
  return j;
}

EvalReport evaluate(std::span<const ScoreVector> preds, std::span<const ScoreVector> gts,
                    std::string checkpoint_id, std::string mode) {
  EvalReport r;
  const auto mse = mse_report(preds, gts);
  r.per_principle_mse = mse.per_principle;
  r.mean_mse = mse.mean;
  r.per_principle_srcc = srcc_report(preds, gts);
  r.n = preds.size();
  r.checkpoint_id = std::move(checkpoint_id);
  r.mode = std::move(mode);
  return r;
}

void write_report_table_csv(const EvalReport& report, std::ostream& out) {
  out << "principle,mse,srcc\n";
  char buf[64];
  for (Principle p : table_order()) {
    std::snprintf(buf, sizeof buf, "%.4f,%.2f", report.per_principle_mse[index_of(p)],
                  report.per_principle_srcc[index_of(p)]);
    out << info(p).display << ',' << buf << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.4f", report.mean_mse);
  out << "Mean," << buf << ",\n";
}

std::string_view to_string(Side s) noexcept { return s == Side::Left ? "left" : "right"; }

InsufficientPairsError::InsufficientPairsError(std::vector<Shortfall> shortfalls)
    : InputError([&] {
        std::string msg = "insufficient eligible pairs:";
        for (const auto& s : shortfalls) {
          msg += " " + std::string(key(s.principle)) + " has " + std::to_string(s.eligible) +
                 " of " + std::to_string(s.requested) + " requested;";
        }
        msg.pop_back();
        return msg;
      }()),
      shortfalls_(std::move(shortfalls)) {}

PairSet build_pair_sets(std::span<const AnnotationRecord> records, double threshold,
                        std::size_t n_per_principle, std::uint64_t seed) {
  if (!(threshold >= 0.0) || !std::isfinite(threshold)) {
    throw ConfigError("pair threshold must be a finite nonnegative number");
  }
  if (n_per_principle == 0) throw ConfigError("n_per_principle must be positive");

  PairSet set;
  set.threshold = threshold;
  set.n_per_principle = n_per_principle;
  set.seed = seed;
  std::vector<Shortfall> shortfalls;
  std::array<std::vector<std::pair<std::size_t, std::size_t>>, kNumPrinciples> eligible;

  for (Principle p : kAllPrinciples) {
    auto& pool = eligible[index_of(p)];
    for (std::size_t i = 0; i < records.size(); ++i) {
      const double a = to_1to5(records[i].gt[p]);
      for (std::size_t j = i + 1; j < records.size(); ++j) {
        const double b = to_1to5(records[j].gt[p]);
        if (std::abs(a - b) >= threshold - kThresholdSlack) pool.emplace_back(i, j);
      }
    }
    set.eligible[index_of(p)] = pool.size();
    if (pool.size() < n_per_principle) shortfalls.push_back({p, pool.size(), n_per_principle});
  }
  if (!shortfalls.empty()) throw InsufficientPairsError(std::move(shortfalls));

  for (Principle p : kAllPrinciples) {
    auto& pool = eligible[index_of(p)];
    Rng rng(derive_seed(seed, "pairs." + std::string(key(p))));
    const std::size_t first = set.pairs.size();
    for (std::size_t k = 0; k < n_per_principle; ++k) {
      // Partial Fisher-Yates: draw without replacement.
      const std::size_t pick = k + rng.below(pool.size() - k);
      std::swap(pool[k], pool[pick]);
      auto [i, j] = pool[k];
      if (rng.below(2) == 1) std::swap(i, j);
      PairComparison c;
      c.principle = p;
      c.pair_id = std::string(key(p)) + "-" + std::to_string(k + 1);
      c.left_id = records[i].image_id;
      c.right_id = records[j].image_id;
      c.gt_left = to_1to5(records[i].gt[p]);
      c.gt_right = to_1to5(records[j].gt[p]);
      c.winner_gt = c.gt_left < c.gt_right ? Side::Left : Side::Right;
      set.pairs.push_back(std::move(c));
    }
    set.per_principle_stats[index_of(p)] =
        diff_stats(std::span(set.pairs).subspan(first, n_per_principle));
  }
  set.stats = diff_stats(set.pairs);
  return set;
}

nlohmann::json PairSet::to_json() const {
  nlohmann::ordered_json j;
  j["threshold"] = threshold;
  j["n_per_principle"] = n_per_principle;
  j["seed"] = seed;
  j["stats"] = stats_json(stats);
  nlohmann::ordered_json per;
  for (Principle p : kAllPrinciples) {
    per[std::string(key(p))] = {{"eligible", eligible[index_of(p)]},
                                {"stats", stats_json(per_principle_stats[index_of(p)])}};
  }
  j["per_principle"] = per;
  j["pairs"] = nlohmann::json::array();
  for (const auto& c : pairs) {
    nlohmann::ordered_json pj;
    pj["pair_id"] = c.pair_id;
    pj["principle"] = key(c.principle);
    pj["left_id"] = c.left_id;
    pj["right_id"] = c.right_id;
    pj["gt_left"] = c.gt_left;
    pj["gt_right"] = c.gt_right;
    pj["winner_gt"] = to_string(c.winner_gt);
    j["pairs"].push_back(pj);
  }
  return j;
}

PairSet PairSet::from_json(const nlohmann::json& j) {
  try {
    PairSet s;
    s.threshold = j.at("threshold").get<double>();
    s.n_per_principle = j.at("n_per_principle").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.stats = stats_from_json(j.at("stats"));
    for (Principle p : kAllPrinciples) {
      const auto& per = j.at("per_principle").at(std::string(key(p)));
      s.eligible[index_of(p)] = per.at("eligible").get<std::size_t>();
      s.per_principle_stats[index_of(p)] = stats_from_json(per.at("stats"));
    }
    for (const auto& pj : j.at("pairs")) {
      PairComparison c;
      c.pair_id = pj.at("pair_id").get<std::string>();
      const auto p = principle_from_key(pj.at("principle").get<std::string>());
      if (!p) throw InputError("pair set: unknown principle " + pj.at("principle").dump());
      c.principle = *p;
      c.left_id = pj.at("left_id").get<std::string>();
      c.right_id = pj.at("right_id").get<std::string>();
      c.gt_left = pj.at("gt_left").get<double>();
      c.gt_right = pj.at("gt_right").get<double>();
      const auto w = pj.at("winner_gt").get<std::string>();
      if (w != "left" && w != "right") throw InputError("pair set: bad winner_gt '" + w + "'");
      c.winner_gt = w == "left" ? Side::Left : Side::Right;
      if (c.left_id == c.right_id) throw InputError("pair set: pair " + c.pair_id + " repeats an image");
      s.pairs.push_back(std::move(c));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed pair set: ") + e.what());
  }
}

nlohmann::json AccuracyTable::to_json() const {
  auto row = [](const PrincipleAccuracy& a) {
    nlohmann::ordered_json r;
    r["correct"] = a.correct;
    r["total"] = a.total;
    r["percent"] = a.percent();
    r["ties"] = a.ties;
    r["abstained"] = a.abstained;
    return r;
  };
  nlohmann::ordered_json j;
  nlohmann::ordered_json per;
  for (Principle p : kAllPrinciples) per[std::string(key(p))] = row(per_principle[index_of(p)]);
  j["per_principle"] = per;
  j["total"] = row(overall);
  return j;
}

AccuracyTable pairwise_accuracy(const Comparator& comparator,
                                std::span<const PairComparison> pairs) {
  AccuracyTable t;
  for (const auto& pair : pairs) {
    Verdict v;
    try {
      v = comparator(pair);
    } catch (const std::exception&) {
      v = Verdict::Abstain;
    }
    auto& row = t.per_principle[index_of(pair.principle)];
    for (PrincipleAccuracy* a : {&row, &t.overall}) {
      ++a->total;
      switch (v) {
        case Verdict::Left:
        case Verdict::Right:
          if ((v == Verdict::Left) == (pair.winner_gt == Side::Left)) ++a->correct;
          break;
        case Verdict::Tie:
          ++a->ties;
          break;
        case Verdict::Abstain:
          ++a->abstained;
          break;
      }
    }
  }
  return t;
}

Comparator score_comparator(std::map<std::string, ScoreVector> predictions, double tie_epsilon) {
  return [preds = std::move(predictions), tie_epsilon](const PairComparison& pair) {
    const auto l = preds.find(pair.left_id);
    const auto r = preds.find(pair.right_id);
    if (l == preds.end() || r == preds.end()) return Verdict::Abstain;
    const double a = l->second[pair.principle];
    const double b = r->second[pair.principle];
    if (std::abs(a - b) <= tie_epsilon) return Verdict::Tie;
    return a < b ? Verdict::Left : Verdict::Right;
  };
}

Comparator oracle_comparator() {
  return [](const PairComparison& pair) {
    return pair.winner_gt == Side::Left ? Verdict::Left : Verdict::Right;
  };
}

Comparator anti_oracle_comparator() {
  return [](const PairComparison& pair) {
    return pair.winner_gt == Side::Left ? Verdict::Right : Verdict::Left;
  };
}

}  // namespace wpclip::eval
