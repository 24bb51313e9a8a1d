#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace productnet::text {

/// Decodes one code point starting at `pos`, advancing `pos`. Invalid or
/// truncated sequences consume one byte and yield U+FFFD.
char32_t decode_utf8(std::string_view s, std::size_t& pos) noexcept;

void append_utf8(std::string& out, char32_t cp);

/// Simple one-to-one lowercase mapping (ASCII, Latin-1, Latin Extended-A,
/// Greek, Cyrillic, fullwidth Latin). Other code points map to themselves.
char32_t to_lower(char32_t cp) noexcept;

/// Letters and digits. Outside ASCII, everything that is not a known
/// punctuation/symbol/space block counts as alphanumeric.
bool is_alnum(char32_t cp) noexcept;

std::string lower(std::string_view s);

std::string trim(std::string_view s);

/// Number of code points.
std::size_t length(std::string_view s) noexcept;

/// At most `max_chars` leading code points of `s`.
std::string truncate(std::string_view s, std::size_t max_chars);

}  // namespace productnet::text
