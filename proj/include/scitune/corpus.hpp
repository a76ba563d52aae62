#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scitune/image.hpp"

namespace scitune {

enum class FigureType { GraphPlot, Scatterplot, NodeDiagram, Equation, BarChart };

inline constexpr std::array<FigureType, 5> kFigureTypes = {
    FigureType::GraphPlot, FigureType::Scatterplot, FigureType::NodeDiagram,
    FigureType::Equation, FigureType::BarChart};

// "Graph Plot", "Scatterplot", "Node Diagram", "Equation", "Bar Chart".
std::string_view display_name(FigureType t);
// Exact match against the display strings.
std::optional<FigureType> figure_type_from_name(std::string_view name);

// The eight arXiv areas covered by SciCap.
inline constexpr std::array<std::string_view, 8> kArxivCategories = {
    "Computer Science", "Economics", "Electrical Engineering and Systems Science",
    "Mathematics",      "Physics",   "Quantitative Biology",
    "Quantitative Finance", "Statistics"};

struct FigureRecord {
  std::string id;
  Image image;
  FigureType figure_type = FigureType::GraphPlot;
  std::string caption;
  std::optional<std::vector<std::string>> ocr;
  std::optional<std::string> mention;
  std::string category;

  bool operator==(const FigureRecord&) const = default;
};

enum class Subject { NAT, SOC, LAN };

std::string_view subject_name(Subject s);
std::optional<Subject> subject_from_name(std::string_view name);

struct QARecord {
  std::string id;
  std::string question;
  std::vector<std::string> choices;
  int answer_index = 0;
  std::optional<std::string> context_text;
  std::optional<Image> context_image;
  std::optional<std::string> lecture;
  std::optional<std::string> solution;
  Subject subject = Subject::NAT;
  int grade = 1;
  std::string topic;

  bool operator==(const QARecord&) const = default;
};

struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  bool operator==(const CorpusSplit&) const = default;
};

struct ImageGeometry {
  int width = 32;
  int height = 32;
  int channels = 1;
};

// Record-level validation; throws scitune::Error.
void validate(const FigureRecord& rec, const std::optional<ImageGeometry>& geometry = std::nullopt);
void validate(const QARecord& rec, const std::optional<ImageGeometry>& geometry = std::nullopt);

// JSONL readers. Image paths in the file are resolved relative to the JSONL's
// directory. Lines holding a "_meta" object are skipped. When `geometry` is
// set, every image must match it.
std::vector<FigureRecord> load_figure_corpus(const std::filesystem::path& path,
                                             const std::optional<ImageGeometry>& geometry = std::nullopt);
std::vector<QARecord> load_qa_corpus(const std::filesystem::path& path,
                                     const std::optional<ImageGeometry>& geometry = std::nullopt);

// Writes `jsonl` plus one `.f32raw` per image under `images/` next to it.
// A non-empty `meta_json` object is written first as {"_meta": ...}.
void write_figure_corpus(const std::filesystem::path& jsonl, const std::vector<FigureRecord>& records,
                         std::string_view meta_json = {});
void write_qa_corpus(const std::filesystem::path& jsonl, const std::vector<QARecord>& records,
                     std::string_view meta_json = {});

struct FigureSynthOptions {
  ImageGeometry geometry;
  double ocr_fraction = 0.5;
  double mention_fraction = 0.5;
};

// Latent parameters behind one synthetic figure. Everything a caption, OCR
// list or mention says about the figure is a function of these, and all of
// them are visible in the rendered pixels.
struct FigureParams {
  FigureType type = FigureType::GraphPlot;
  int count = 0;     // 0..3
  int quantity = 0;  // 0..2
  bool has_ocr = false;
  bool has_mention = false;
};

// Procedural figure. The top three patch rows carry a class-specific drawing
// (with nuisance placement drawn from `seed`); the bottom patch row is a
// legend strip whose four cells encode count, quantity, OCR and mention flags.
Image render_synthetic_figure(const FigureParams& params, std::uint64_t seed,
                              const ImageGeometry& geometry = {});

std::vector<FigureRecord> synth_figure_corpus(std::size_t n, std::uint64_t seed,
                                              const FigureSynthOptions& options = {});

std::vector<QARecord> synth_qa_corpus(std::size_t n, std::size_t n_lectures, std::uint64_t seed,
                                      const ImageGeometry& geometry = {});

CorpusSplit make_split(const std::vector<std::string>& ids, const std::array<double, 3>& fractions,
                       std::uint64_t seed);

void save_split(const std::filesystem::path& path, const CorpusSplit& split, std::string_view meta_json = {});
CorpusSplit load_split(const std::filesystem::path& path);

}  // namespace scitune
