#pragma once

// Domain vocabulary: the five Wölfflin principles, score vectors, annotation
// records and antonym prompt pairs.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

namespace wpclip {

// Enumeration order is the canonical column order everywhere (CSV headers,
// score-vector serialization, report tables).
enum class Principle : std::size_t {
  LinearPainterly = 0,
  ClosedOpen = 1,
  AbsoluteRelative = 2,
  PlanarRecessional = 3,
  MultiplicityUnity = 4,
};

inline constexpr std::size_t kNumPrinciples = 5;

inline constexpr std::array<Principle, kNumPrinciples> kAllPrinciples = {
    Principle::LinearPainterly, Principle::ClosedOpen, Principle::AbsoluteRelative,
    Principle::PlanarRecessional, Principle::MultiplicityUnity};

constexpr std::size_t index_of(Principle p) noexcept { return static_cast<std::size_t>(p); }

// A score of 0 means fully `pole_low`, 1 means fully `pole_high`.
struct PrincipleInfo {
  Principle id;
  std::string_view key;        // serialization key, e.g. "linear_painterly"
  std::string_view pole_low;   // e.g. "Linear"
  std::string_view pole_high;  // e.g. "Painterly"
  std::string_view display;    // e.g. "Linear-Painterly"
};

const PrincipleInfo& info(Principle p) noexcept;
std::string_view key(Principle p) noexcept;
std::optional<Principle> principle_from_key(std::string_view key) noexcept;

// Five scores in [0,1], indexed by Principle.
class ScoreVector {
 public:
  ScoreVector() = default;
  // Throws DomainError if any value is outside [0,1] or non-finite.
  explicit ScoreVector(const std::array<double, kNumPrinciples>& values);

  double operator[](Principle p) const noexcept { return values_[index_of(p)]; }
  double at(std::size_t i) const { return values_.at(i); }
  void set(Principle p, double value);
  const std::array<double, kNumPrinciples>& values() const noexcept { return values_; }

  friend bool operator==(const ScoreVector&, const ScoreVector&) = default;

 private:
  std::array<double, kNumPrinciples> values_{};
};

enum class ImageSource { Real, Gan, Can, Unlabeled };

std::string_view to_string(ImageSource s) noexcept;
std::optional<ImageSource> image_source_from_string(std::string_view s) noexcept;

struct AnnotationRecord {
  std::string image_id;
  std::string image_path;
  ScoreVector gt;
  ImageSource source = ImageSource::Unlabeled;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

struct PromptPair {
  Principle principle;
  std::string text_low;
  std::string text_high;
};

// Linear map between the unit annotation scale and the 1-5 scale used for
// pair selection: s -> 1 + 4s. Both throw DomainError outside their range.
double to_1to5(double unit_score);
double to_unit(double one_to_five_score);

}  // namespace wpclip
