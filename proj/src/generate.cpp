#include "scitune/generate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>

#include "scitune/error.hpp"
#include "scitune/rng.hpp"

namespace scitune {

std::vector<TokenId> generate_tokens(const Model& m, const std::vector<TokenId>& context, const Image* img,
                                     const GenConfig& cfg) {
  if (cfg.temperature < 0.0 || !std::isfinite(cfg.temperature)) throw Error("temperature must be >= 0");
  std::vector<TokenId> seq = context;
  std::vector<TokenId> out;
  Rng rng(cfg.seed);
  while (out.size() < cfg.max_new_tokens && seq.size() < m.config().max_len) {
    const std::vector<double> logits = forward_logits(m, seq, img);
    std::size_t pick = 0;
    if (cfg.temperature == 0.0) {
      for (std::size_t j = 1; j < logits.size(); ++j) {
        if (logits[j] > logits[pick]) pick = j;
      }
    } else {
      const double top = *std::max_element(logits.begin(), logits.end());
      std::vector<double> w(logits.size());
      double total = 0.0;
      for (std::size_t j = 0; j < logits.size(); ++j) total += (w[j] = std::exp((logits[j] - top) / cfg.temperature));
      double u = rng.uniform() * total;
      pick = logits.size() - 1;
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (u < w[j]) {
          pick = j;
          break;
        }
        u -= w[j];
      }
    }
    const auto id = static_cast<TokenId>(pick);
    if (id == kEos) break;
    out.push_back(id);
    seq.push_back(id);
  }
  return out;
}

std::vector<TokenId> encode_context(const Vocab& v, std::string_view context, const ModelConfig& cfg) {
  TokenSequence s = encode(v, context, "", cfg.k_visual(), cfg.max_len);
  const auto n = static_cast<std::size_t>(std::count(s.loss_mask.begin(), s.loss_mask.end(), false));
  s.ids.resize(n);
  return s.ids;
}

std::string generate_text(const Model& m, const Vocab& v, const InstructionRecord& rec, const GenConfig& cfg) {
  const std::vector<TokenId> ctx = encode_context(v, render(rec).context, m.config());
  const Image* img = rec.image ? &*rec.image : nullptr;
  return decode(v, generate_tokens(m, ctx, img, cfg));
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool iequals_prefix(std::string_view text, std::string_view prefix) {
  if (text.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(text[i])) != std::tolower(static_cast<unsigned char>(prefix[i]))) {
      return false;
    }
  }
  return true;
}

struct SentinelHit {
  std::string kind;  // lowercase
  std::size_t begin;
  std::size_t end;
};

std::vector<SentinelHit> find_sentinels(std::string_view text, const std::regex& re) {
  std::vector<SentinelHit> hits;
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
    std::string kind = (*it)[1].str();
    std::transform(kind.begin(), kind.end(), kind.begin(), [](unsigned char c) { return std::tolower(c); });
    hits.push_back({kind, static_cast<std::size_t>(it->position(0)),
                    static_cast<std::size_t>(it->position(0) + it->length(0))});
  }
  return hits;
}

std::optional<std::string> segment_after(std::string_view text, const std::vector<SentinelHit>& hits,
                                         std::string_view kind) {
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i].kind != kind) continue;
    const std::size_t stop = i + 1 < hits.size() ? hits[i + 1].begin : text.size();
    return std::string(trim(text.substr(hits[i].end, stop - hits[i].end)));
  }
  return std::nullopt;
}

const std::regex& figure_sentinels() {
  static const std::regex re(R"(\b(ocr|mention)\s*:)", std::regex::icase);
  return re;
}

const std::regex& qa_sentinels() {
  static const std::regex re(R"(\b(lecture|solution)\s*:)", std::regex::icase);
  return re;
}

}  // namespace

ParsedPretrainOutput parse_pretrain_output(std::string_view text) {
  ParsedPretrainOutput out;
  std::string_view rest = trim(text);
  std::size_t best = 0;
  for (FigureType t : kFigureTypes) {
    const std::string_view name = display_name(t);
    if (name.size() <= best || !iequals_prefix(rest, name)) continue;
    if (rest.size() > name.size() && std::isalnum(static_cast<unsigned char>(rest[name.size()]))) continue;
    out.figure_type = t;
    best = name.size();
  }
  rest = trim(rest.substr(best));

  const auto hits = find_sentinels(rest, figure_sentinels());
  std::string_view head = trim(rest.substr(0, hits.empty() ? rest.size() : hits.front().begin));
  for (std::size_t i = 0; i < head.size(); ++i) {
    if (head[i] == '.' && (i + 1 == head.size() || std::isspace(static_cast<unsigned char>(head[i + 1])))) {
      head = head.substr(0, i + 1);
      break;
    }
  }
  if (!head.empty()) out.caption = std::string(head);
  out.ocr = segment_after(rest, hits, "ocr");
  out.mention = segment_after(rest, hits, "mention");
  return out;
}

ParsedQaOutput parse_qa_output(std::string_view text, std::size_t n_choices) {
  ParsedQaOutput out;
  static const std::regex answer_re(R"(the answer is\s+\(?([a-z])\b)", std::regex::icase);
  const std::string s(text);
  std::smatch m;
  if (std::regex_search(s, m, answer_re)) {
    const int idx = std::tolower(static_cast<unsigned char>(m[1].str()[0])) - 'a';
    if (idx >= 0 && static_cast<std::size_t>(idx) < std::min(n_choices, kMaxChoices)) out.answer_index = idx;
  }
  const auto hits = find_sentinels(text, qa_sentinels());
  out.lecture = segment_after(text, hits, "lecture");
  out.solution = segment_after(text, hits, "solution");
  return out;
}

}  // namespace scitune
