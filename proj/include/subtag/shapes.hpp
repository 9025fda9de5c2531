#pragma once

#include <map>
#include <string>
#include <string_view>

#include "subtag/error.hpp"
#include "subtag/unicode.hpp"

namespace subtag::shapes {

/// Maps characters to classes (upper 'A', lower 'a', digit '0', anything else
/// itself) and collapses runs of the same class. "Magnus" -> "Aa".
inline std::string word_shape(std::string_view word) {
  std::u32string shape;
  for (char32_t c : unicode::decode(word)) {
    char32_t cls = c;
    if (unicode::is_upper(c))
      cls = U'A';
    else if (unicode::is_lower(c))
      cls = U'a';
    else if (unicode::is_digit(c))
      cls = U'0';
    if (shape.empty() || shape.back() != cls) shape.push_back(cls);
  }
  return unicode::encode(shape);
}

/// Uppercase (incl. titlecase) letters over all cased letters.
inline double capitalization_ratio(std::string_view sample) {
  std::size_t upper = 0;
  std::size_t cased = 0;
  for (char32_t c : unicode::decode(sample)) {
    if (unicode::is_upper(c)) {
      ++upper;
      ++cased;
    } else if (unicode::is_lower(c)) {
      ++cased;
    }
  }
  if (cased == 0) throw UndefinedRatioError("sample contains no cased letters");
  return static_cast<double>(upper) / static_cast<double>(cased);
}

inline bool decide_shape(double threshold, std::string_view sample) {
  return capitalization_ratio(sample) >= threshold;
}

/// Per-language "+someshape" decision: shape features only where the
/// capitalization ratio reaches the threshold. Caseless samples disable them.
class ShapePolicy {
 public:
  static constexpr double kDefaultThreshold = 0.02;

  explicit ShapePolicy(double threshold = kDefaultThreshold) : threshold_(threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0))
      throw ConfigError("shape threshold must lie in [0,1]");
  }

  double threshold() const noexcept { return threshold_; }

  bool observe(const std::string &language, std::string_view sample) {
    bool on = false;
    try {
      on = decide_shape(threshold_, sample);
    } catch (const UndefinedRatioError &) {
      on = false;
    }
    enabled_[language] = on;
    return on;
  }

  bool enabled(const std::string &language) const {
    auto it = enabled_.find(language);
    return it != enabled_.end() && it->second;
  }

  const std::map<std::string, bool> &decisions() const noexcept { return enabled_; }

 private:
  double threshold_;
  std::map<std::string, bool> enabled_;
};

}  // namespace subtag::shapes
