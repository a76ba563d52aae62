#include "scitune/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "scitune/error.hpp"
#include "scitune/hash.hpp"
#include "scitune/instruction.hpp"

namespace scitune {

namespace {

constexpr std::string_view kSpecialNames[] = {"<bos>", "<eos>", "<pad>", "<img>"};
constexpr std::string_view kUnkName = "<unk>";

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
      continue;
    }
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
    if (!std::isspace(c)) out.emplace_back(1, static_cast<char>(c));
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocab::Vocab(std::vector<std::string> ordinary) {
  if (ordinary.empty() || ordinary.front() != kUnkName) {
    throw Error("vocabulary must start with " + std::string(kUnkName));
  }
  for (auto s : kSpecialNames) tokens_.emplace_back(s);
  for (auto& t : ordinary) tokens_.push_back(std::move(t));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\r\n") != std::string::npos) {
      throw Error("invalid vocabulary token at id " + std::to_string(i));
    }
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::build(const std::vector<std::string>& corpus_texts, std::size_t max_size) {
  if (max_size < 8) throw Error("vocabulary max_size must be at least 8");
  if (corpus_texts.empty()) throw Error("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus_texts) {
    std::string_view rest = text;
    // The image marker is structural, never a word.
    for (auto pos = rest.find(kImageMarker); pos != std::string_view::npos; pos = rest.find(kImageMarker)) {
      for (auto& w : split_words(rest.substr(0, pos))) ++counts[w];
      rest.remove_prefix(pos + kImageMarker.size());
    }
    for (auto& w : split_words(rest)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  ranked.erase(std::remove_if(ranked.begin(), ranked.end(),
                              [](const auto& p) {
                                return p.first == kUnkName ||
                                       std::find(std::begin(kSpecialNames), std::end(kSpecialNames), p.first) !=
                                           std::end(kSpecialNames);
                              }),
               ranked.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t room = max_size - kNumSpecial - 1;
  if (ranked.size() > room) ranked.resize(room);
  std::vector<std::string> ordinary{std::string(kUnkName)};
  for (auto& [w, c] : ranked) ordinary.push_back(w);
  return Vocab(std::move(ordinary));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary " + path.string());
  std::vector<std::string> ordinary;
  std::string line;
  while (std::getline(in, line)) ordinary.push_back(line);
  return Vocab(std::move(ordinary));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary " + path.string());
  out << serialize();
}

std::string Vocab::serialize() const {
  std::string out;
  for (std::size_t i = kNumSpecial; i < tokens_.size(); ++i) {
    out += tokens_[i];
    out.push_back('\n');
  }
  return out;
}

std::string Vocab::hash() const { return sha256_hex(serialize()); }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end() || it->second < kUnk) return kUnk;
  return it->second;
}

bool Vocab::contains(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it != index_.end() && it->second > kUnk;
}

std::vector<TokenId> encode_text(const Vocab& v, std::string_view text) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(v.id(w));
  return ids;
}

TokenSequence encode(const Vocab& v, std::string_view context, std::string_view target, std::size_t k_visual,
                     std::size_t max_len) {
  if (max_len < k_visual + 2) {
    throw Error("max_len " + std::to_string(max_len) + " is smaller than k_visual + 2");
  }
  TokenSequence seq;
  seq.ids.push_back(kBos);
  const auto marker = context.find(kImageMarker);
  if (marker != std::string_view::npos) {
    if (context.find(kImageMarker, marker + kImageMarker.size()) != std::string_view::npos) {
      throw Error("context holds more than one image marker");
    }
    for (TokenId t : encode_text(v, context.substr(0, marker))) seq.ids.push_back(t);
    seq.visual_span = VisualSpan{seq.ids.size(), k_visual};
    seq.ids.insert(seq.ids.end(), k_visual, kImg);
    for (TokenId t : encode_text(v, context.substr(marker + kImageMarker.size()))) seq.ids.push_back(t);
  } else {
    for (TokenId t : encode_text(v, context)) seq.ids.push_back(t);
  }
  if (seq.ids.size() > max_len) {
    throw Error("context of " + std::to_string(seq.ids.size()) + " tokens exceeds max_len " + std::to_string(max_len));
  }
  seq.loss_mask.assign(seq.ids.size(), false);
  std::vector<TokenId> tail = encode_text(v, target);
  tail.push_back(kEos);
  const std::size_t room = max_len - seq.ids.size();
  if (tail.size() > room) tail.resize(room);
  for (TokenId t : tail) {
    seq.ids.push_back(t);
    seq.loss_mask.push_back(true);
  }
  return seq;
}

std::string decode(const Vocab& v, const std::vector<TokenId>& ids) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = v.token(id);
    if (id < kNumSpecial) continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace scitune
