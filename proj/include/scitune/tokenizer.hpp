#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace scitune {

using TokenId = int;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kPad = 2;
inline constexpr TokenId kImg = 3;
inline constexpr TokenId kUnk = 4;  // first ordinary id
inline constexpr TokenId kNumSpecial = 4;

// Lowercased word/punctuation split. A word is a maximal run of ASCII
// alphanumerics or non-ASCII bytes; any other non-space character is a
// token on its own.
std::vector<std::string> split_words(std::string_view text);
// split_words joined by single spaces.
std::string normalize_text(std::string_view text);

class Vocab {
 public:
  // Ordinary tokens in id order starting at kUnk ("<unk>" first).
  explicit Vocab(std::vector<std::string> ordinary);

  static Vocab build(const std::vector<std::string>& corpus_texts, std::size_t max_size);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  TokenId id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;

  // One token per line, id = line number + 4.
  std::string serialize() const;
  std::string hash() const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;  // includes the four specials
  std::unordered_map<std::string, TokenId> index_;
};

struct VisualSpan {
  std::size_t start = 0;
  std::size_t length = 0;

  bool operator==(const VisualSpan&) const = default;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<bool> loss_mask;
  std::optional<VisualSpan> visual_span;
};

std::vector<TokenId> encode_text(const Vocab& v, std::string_view text);

// BOS, context (image marker expanded to k_visual IMG ids), target, EOS.
// The loss mask covers target tokens and EOS. Overflow drops the tail of
// (target, EOS); a context that alone exceeds max_len is an error.
TokenSequence encode(const Vocab& v, std::string_view context, std::string_view target, std::size_t k_visual,
                     std::size_t max_len);

std::string decode(const Vocab& v, const std::vector<TokenId>& ids);

}  // namespace scitune
