#include "wpclip/core.hpp"

#include <cmath>
#include <string>

#include "wpclip/errors.hpp"

namespace wpclip {

namespace {

constexpr std::array<PrincipleInfo, kNumPrinciples> kInfo = {{
    {Principle::LinearPainterly, "linear_painterly", "Linear", "Painterly", "Linear-Painterly"},
    {Principle::ClosedOpen, "closed_open", "Closed", "Open", "Closed-Open"},
    {Principle::AbsoluteRelative, "absolute_relative", "Absolute", "Relative",
     "Absolute-Relative"},
    {Principle::PlanarRecessional, "planar_recessional", "Planar", "Recessional",
     "Planar-Recessional"},
    {Principle::MultiplicityUnity, "multiplicity_unity", "Multiplicity", "Unity",
     "Multiplicity-Unity"},
}};

void check_unit(double v, const char* what) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
    throw DomainError(std::string(what) + ": value " + std::to_string(v) +
                      " outside [0,1]");
  }
}

}  // namespace

ValidationError::ValidationError(const std::string& source, std::vector<RowIssue> issues)
    : InputError([&] {
        std::string msg = source + ": " + std::to_string(issues.size()) + " invalid row(s)";
        for (const auto& issue : issues) {
          msg += "\n  row " + std::to_string(issue.row) + ": " + issue.message;
        }
        return msg;
      }()),
      issues_(std::move(issues)) {}

const PrincipleInfo& info(Principle p) noexcept { return kInfo[index_of(p)]; }

std::string_view key(Principle p) noexcept { return kInfo[index_of(p)].key; }

std::optional<Principle> principle_from_key(std::string_view k) noexcept {
  for (const auto& i : kInfo) {
    if (i.key == k) return i.id;
  }
  return std::nullopt;
}

ScoreVector::ScoreVector(const std::array<double, kNumPrinciples>& values) : values_(values) {
  for (double v : values_) check_unit(v, "ScoreVector");
}

void ScoreVector::set(Principle p, double value) {
  check_unit(value, "ScoreVector::set");
  values_[index_of(p)] = value;
}

std::string_view to_string(ImageSource s) noexcept {
  switch (s) {
    case ImageSource::Real:
      return "real";
    case ImageSource::Gan:
      return "gan";
    case ImageSource::Can:
      return "can";
    case ImageSource::Unlabeled:
      break;
  }
  return "unlabeled";
}

std::optional<ImageSource> image_source_from_string(std::string_view s) noexcept {
  if (s == "real") return ImageSource::Real;
  if (s == "gan") return ImageSource::Gan;
  if (s == "can") return ImageSource::Can;
  if (s == "unlabeled" || s.empty()) return ImageSource::Unlabeled;
  return std::nullopt;
}

double to_1to5(double unit_score) {
  check_unit(unit_score, "to_1to5");
  return 1.0 + 4.0 * unit_score;
}

double to_unit(double s) {
  if (!std::isfinite(s) || s < 1.0 || s > 5.0) {
    throw DomainError("to_unit: value " + std::to_string(s) + " outside [1,5]");
  }
  return (s - 1.0) / 4.0;
}

}  // namespace wpclip
