#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scitune/corpus.hpp"
#include "scitune/generate.hpp"
#include "scitune/model.hpp"

namespace scitune {

// Sentence BLEU-4: uniform weights, add-one smoothing for n > 1, brevity
// penalty exp(1 - r/h) when h < r. Tokens come from split_words.
double bleu(std::string_view hypothesis, std::string_view reference);
// ROUGE-L F1 over split_words tokens.
double rouge_l(std::string_view hypothesis, std::string_view reference);

struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;

  std::optional<double> accuracy() const;
  void add(bool ok) {
    correct += ok ? 1 : 0;
    ++total;
  }
  bool operator==(const Tally&) const = default;
};

struct FigurePrediction {
  std::string id;
  ParsedPretrainOutput parsed;
};

struct QaPrediction {
  std::string id;
  ParsedQaOutput parsed;
};

// Rows in display order: the five classes, then "All" (micro average).
struct FigureTypeReport {
  std::vector<std::pair<std::string, Tally>> rows;
};

FigureTypeReport figure_type_eval(const std::vector<FigurePrediction>& preds, const std::vector<FigureRecord>& gold);
// Same layout from bare labels (used for the centroid baseline).
FigureTypeReport figure_type_eval(const std::vector<std::optional<FigureType>>& preds,
                                  const std::vector<FigureType>& gold);

// Frozen-encoder features of one image, flattened row-major.
std::vector<double> encoder_features(const Model& m, const Image& img);

// Nearest class prototype (mean exemplar) by cosine similarity; ties go to
// the lexicographically first class name.
std::vector<FigureType> centroid_baseline(const std::vector<std::pair<FigureType, std::vector<double>>>& exemplars,
                                          const std::vector<std::vector<double>>& test);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
  std::size_t n = 0;
};

MeanSd mean_sd(const std::vector<double>& xs);

struct CaptionReport {
  MeanSd bleu;
  MeanSd rouge;
};

CaptionReport caption_eval(const std::vector<FigurePrediction>& preds, const std::vector<FigureRecord>& gold);

inline constexpr std::array<std::string_view, 8> kQaStrata = {"NAT", "SOC", "LAN", "TXT", "IMG", "NO", "G1-6", "G7-12"};

// Strata in kQaStrata order followed by "Avg" (micro accuracy over all
// questions). TXT and IMG overlap for records with both contexts.
struct QaReport {
  std::vector<std::pair<std::string, Tally>> rows;
  std::vector<bool> correct;  // per gold record, in gold order
};

QaReport qa_eval(const std::vector<QaPrediction>& preds, const std::vector<QARecord>& gold);

struct TextScores {
  double bleu = 0.0;
  double rouge = 0.0;
  std::size_t n = 0;
};

// cells[part][subset]: part 0 = Lecture, 1 = Solution; subset 0 = All,
// 1 = Correct, 2 = Incorrect. Empty subsets are absent.
struct CotReport {
  std::array<std::array<std::optional<TextScores>, 3>, 2> cells;
};

CotReport cot_eval(const std::vector<QaPrediction>& preds, const std::vector<QARecord>& gold);

struct FewshotRow {
  std::size_t threshold = 0;
  Tally tally;
};

inline constexpr std::array<std::size_t, 4> kFewshotThresholds = {5, 10, 25, 50};

// Test questions whose gold lecture occurs at most `threshold` times among
// the training questions (cumulative buckets). A question without a
// lecture counts as frequency 0.
std::vector<FewshotRow> fewshot_eval(const std::vector<QARecord>& train, const std::vector<QARecord>& test,
                                     const std::vector<bool>& test_correct);

// JSON renderings (2-space indented, stable key order) and aligned text tables.
std::string to_json(const FigureTypeReport& r);
std::string to_json(const CaptionReport& r);
std::string to_json(const QaReport& r);
std::string to_json(const CotReport& r);
std::string to_json(const std::vector<FewshotRow>& rows);

std::string figure_type_table(const FigureTypeReport& trained, const std::optional<FigureTypeReport>& baseline);
std::string caption_table(const CaptionReport& r);
std::string qa_table(const QaReport& r);
std::string cot_table(const CotReport& r);
std::string fewshot_table(const std::vector<FewshotRow>& rows);

}  // namespace scitune
