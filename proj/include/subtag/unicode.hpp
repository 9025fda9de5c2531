#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "subtag/error.hpp"

namespace subtag::unicode {

/// Decodes UTF-8 into code points. Ill-formed sequences raise ParseError.
inline std::u32string decode(std::string_view text) {
  std::u32string out;
  out.reserve(text.size());
  const auto *s = reinterpret_cast<const uint8_t *>(text.data());
  const int32_t length = static_cast<int32_t>(text.size());
  int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    if (c < 0) throw ParseError("invalid UTF-8 at byte offset " + std::to_string(i));
    out.push_back(static_cast<char32_t>(c));
  }
  return out;
}

inline void append(std::string &out, char32_t c) {
  uint8_t buf[4];
  int32_t n = 0;
  U8_APPEND_UNSAFE(buf, n, static_cast<UChar32>(c));
  out.append(reinterpret_cast<const char *>(buf), static_cast<std::size_t>(n));
}

inline std::string encode(std::u32string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t c : text) append(out, c);
  return out;
}

inline std::string encode(char32_t c) {
  std::string out;
  append(out, c);
  return out;
}

inline bool is_space(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)) != 0; }

// Titlecase letters count as uppercase.
inline bool is_upper(char32_t c) {
  const auto t = u_charType(static_cast<UChar32>(c));
  return t == U_UPPERCASE_LETTER || t == U_TITLECASE_LETTER;
}

inline bool is_lower(char32_t c) { return u_charType(static_cast<UChar32>(c)) == U_LOWERCASE_LETTER; }

inline bool is_cased_letter(char32_t c) { return is_upper(c) || is_lower(c); }

inline bool is_digit(char32_t c) {
  return u_charType(static_cast<UChar32>(c)) == U_DECIMAL_DIGIT_NUMBER;
}

inline bool contains_space(std::string_view text) {
  for (char32_t c : decode(text))
    if (is_space(c)) return true;
  return false;
}

/// Splits on Unicode whitespace, dropping empty pieces.
inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::u32string current;
  for (char32_t c : decode(text)) {
    if (is_space(c)) {
      if (!current.empty()) words.push_back(encode(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(encode(current));
  return words;
}

inline std::size_t length(std::string_view text) { return decode(text).size(); }

}  // namespace subtag::unicode
