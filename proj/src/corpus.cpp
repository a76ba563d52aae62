#include "scitune/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "scitune/error.hpp"
#include "scitune/rng.hpp"

namespace scitune {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 5> kFigureNames = {"Graph Plot", "Scatterplot", "Node Diagram",
                                                          "Equation", "Bar Chart"};
constexpr std::array<std::string_view, 3> kSubjectNames = {"NAT", "SOC", "LAN"};

}  // namespace

std::string_view display_name(FigureType t) { return kFigureNames[static_cast<int>(t)]; }

std::optional<FigureType> figure_type_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kFigureNames.size(); ++i) {
    if (kFigureNames[i] == name) return kFigureTypes[i];
  }
  return std::nullopt;
}

std::string_view subject_name(Subject s) { return kSubjectNames[static_cast<int>(s)]; }

std::optional<Subject> subject_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kSubjectNames.size(); ++i) {
    if (kSubjectNames[i] == name) return static_cast<Subject>(i);
  }
  return std::nullopt;
}

namespace {

void check_geometry(const Image& img, const std::optional<ImageGeometry>& g, const std::string& id) {
  validate(img);
  if (g && (img.width != g->width || img.height != g->height || img.channels != g->channels)) {
    throw Error("image for record '" + id + "' is " + std::to_string(img.width) + "x" +
                std::to_string(img.height) + "x" + std::to_string(img.channels) + ", expected " +
                std::to_string(g->width) + "x" + std::to_string(g->height) + "x" +
                std::to_string(g->channels));
  }
}

}  // namespace

void validate(const FigureRecord& rec, const std::optional<ImageGeometry>& geometry) {
  if (rec.id.empty()) throw Error("figure record with empty id");
  if (rec.caption.empty()) throw Error("figure record '" + rec.id + "' has an empty caption");
  check_geometry(rec.image, geometry, rec.id);
}

void validate(const QARecord& rec, const std::optional<ImageGeometry>& geometry) {
  if (rec.id.empty()) throw Error("QA record with empty id");
  if (rec.choices.empty()) throw Error("QA record '" + rec.id + "' has no choices");
  if (rec.choices.size() < 2 || rec.choices.size() > 5) {
    throw Error("QA record '" + rec.id + "' has " + std::to_string(rec.choices.size()) +
                " choices, expected 2-5");
  }
  if (rec.answer_index < 0 || static_cast<std::size_t>(rec.answer_index) >= rec.choices.size()) {
    throw Error("QA record '" + rec.id + "' answer_index " + std::to_string(rec.answer_index) +
                " out of range for " + std::to_string(rec.choices.size()) + " choices");
  }
  if (rec.grade < 1 || rec.grade > 12) {
    throw Error("QA record '" + rec.id + "' grade " + std::to_string(rec.grade) + " outside 1-12");
  }
  if (rec.context_image) check_geometry(*rec.context_image, geometry, rec.id);
}

// ---------------------------------------------------------------------------
// JSONL I/O

namespace {

template <class F>
void for_each_line(const fs::path& path, F&& fn) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("malformed record at line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!obj.is_object()) throw Error("malformed record at line " + std::to_string(lineno) + ": not an object");
    if (obj.contains("_meta")) continue;  // provenance header line
    fn(obj, lineno);
  }
}

template <class T>
T field(const json& obj, const char* key, std::size_t lineno) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error("malformed record at line " + std::to_string(lineno) + ": missing field '" + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw Error("malformed record at line " + std::to_string(lineno) + ": field '" + key +
                "' has the wrong type");
  }
}

template <class T>
std::optional<T> optional_field(const json& obj, const char* key, std::size_t lineno) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  return field<T>(obj, key, lineno);
}

Image load_referenced_image(const fs::path& base, const std::string& rel, const std::string& id) {
  const fs::path p = base / rel;
  if (!fs::exists(p)) throw Error("missing image file for record '" + id + "': " + p.string());
  return load_image(p);
}

void ensure_unique(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  auto dup = std::adjacent_find(ids.begin(), ids.end());
  if (dup != ids.end()) throw Error("duplicate record id '" + *dup + "'");
}

std::string image_relpath(const std::string& id) { return "images/" + id + ".f32raw"; }

void write_meta_line(std::ostream& out, std::string_view meta_json) {
  if (meta_json.empty()) return;
  ordered_json line;
  line["_meta"] = ordered_json::parse(meta_json);
  out << line.dump() << '\n';
}

void prepare_output(const fs::path& jsonl) {
  const fs::path dir = jsonl.has_parent_path() ? jsonl.parent_path() : fs::path(".");
  fs::create_directories(dir / "images");
}

}  // namespace

std::vector<FigureRecord> load_figure_corpus(const fs::path& path, const std::optional<ImageGeometry>& geometry) {
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::vector<FigureRecord> out;
  std::vector<std::string> ids;
  for_each_line(path, [&](const json& obj, std::size_t lineno) {
    FigureRecord rec;
    rec.id = field<std::string>(obj, "id", lineno);
    const auto type_name = field<std::string>(obj, "figure_type", lineno);
    auto type = figure_type_from_name(type_name);
    if (!type) throw Error("unknown figure type '" + type_name + "' at line " + std::to_string(lineno));
    rec.figure_type = *type;
    rec.caption = field<std::string>(obj, "caption", lineno);
    rec.ocr = optional_field<std::vector<std::string>>(obj, "ocr", lineno);
    rec.mention = optional_field<std::string>(obj, "mention", lineno);
    rec.category = field<std::string>(obj, "category", lineno);
    rec.image = load_referenced_image(base, field<std::string>(obj, "image", lineno), rec.id);
    try {
      validate(rec, geometry);
    } catch (const Error& e) {
      throw Error(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
    ids.push_back(rec.id);
    out.push_back(std::move(rec));
  });
  ensure_unique(std::move(ids));
  return out;
}

std::vector<QARecord> load_qa_corpus(const fs::path& path, const std::optional<ImageGeometry>& geometry) {
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::vector<QARecord> out;
  std::vector<std::string> ids;
  for_each_line(path, [&](const json& obj, std::size_t lineno) {
    QARecord rec;
    rec.id = field<std::string>(obj, "id", lineno);
    rec.question = field<std::string>(obj, "question", lineno);
    rec.choices = field<std::vector<std::string>>(obj, "choices", lineno);
    rec.answer_index = field<int>(obj, "answer_index", lineno);
    rec.context_text = optional_field<std::string>(obj, "context_text", lineno);
    if (auto img = optional_field<std::string>(obj, "context_image", lineno)) {
      rec.context_image = load_referenced_image(base, *img, rec.id);
    }
    rec.lecture = optional_field<std::string>(obj, "lecture", lineno);
    rec.solution = optional_field<std::string>(obj, "solution", lineno);
    const auto subject = field<std::string>(obj, "subject", lineno);
    auto s = subject_from_name(subject);
    if (!s) throw Error("unknown subject '" + subject + "' at line " + std::to_string(lineno));
    rec.subject = *s;
    rec.grade = field<int>(obj, "grade", lineno);
    rec.topic = field<std::string>(obj, "topic", lineno);
    try {
      validate(rec, geometry);
    } catch (const Error& e) {
      throw Error(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
    ids.push_back(rec.id);
    out.push_back(std::move(rec));
  });
  ensure_unique(std::move(ids));
  return out;
}

void write_figure_corpus(const fs::path& jsonl, const std::vector<FigureRecord>& records, std::string_view meta_json) {
  prepare_output(jsonl);
  const fs::path base = jsonl.has_parent_path() ? jsonl.parent_path() : fs::path(".");
  std::ofstream out(jsonl);
  if (!out) throw Error("cannot write " + jsonl.string());
  write_meta_line(out, meta_json);
  for (const auto& rec : records) {
    validate(rec);
    ordered_json obj;
    obj["id"] = rec.id;
    obj["image"] = image_relpath(rec.id);
    obj["figure_type"] = display_name(rec.figure_type);
    obj["caption"] = rec.caption;
    if (rec.ocr) obj["ocr"] = *rec.ocr;
    if (rec.mention) obj["mention"] = *rec.mention;
    obj["category"] = rec.category;
    out << obj.dump() << '\n';
    save_f32raw(rec.image, base / image_relpath(rec.id));
  }
}

void write_qa_corpus(const fs::path& jsonl, const std::vector<QARecord>& records, std::string_view meta_json) {
  prepare_output(jsonl);
  const fs::path base = jsonl.has_parent_path() ? jsonl.parent_path() : fs::path(".");
  std::ofstream out(jsonl);
  if (!out) throw Error("cannot write " + jsonl.string());
  write_meta_line(out, meta_json);
  for (const auto& rec : records) {
    validate(rec);
    ordered_json obj;
    obj["id"] = rec.id;
    obj["question"] = rec.question;
    obj["choices"] = rec.choices;
    obj["answer_index"] = rec.answer_index;
    if (rec.context_text) obj["context_text"] = *rec.context_text;
    if (rec.context_image) {
      obj["context_image"] = image_relpath(rec.id);
      save_f32raw(*rec.context_image, base / image_relpath(rec.id));
    }
    if (rec.lecture) obj["lecture"] = *rec.lecture;
    if (rec.solution) obj["solution"] = *rec.solution;
    obj["subject"] = subject_name(rec.subject);
    obj["grade"] = rec.grade;
    obj["topic"] = rec.topic;
    out << obj.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic figures

namespace {

constexpr std::array<std::string_view, 3> kQuantities = {"voltage", "temperature", "pressure"};
constexpr std::array<std::string_view, 3> kUnits = {"V", "K", "Pa"};
constexpr std::array<std::string_view, 4> kCountWords = {"two", "three", "four", "five"};
constexpr std::array<std::string_view, 5> kTypeNouns = {"plot", "scatterplot", "diagram", "equation", "chart"};

class Canvas {
 public:
  explicit Canvas(Image& img) : img_(img) {}

  void set(int x, int y, float v) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    for (int c = 0; c < img_.channels; ++c) img_.at(x, y, c) = std::max(img_.at(x, y, c), v);
  }
  void hline(int x0, int x1, int y, float v) {
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, v);
  }
  void vline(int x, int y0, int y1, float v) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) set(x, y, v);
  }
  void fill(int x0, int y0, int x1, int y1, float v) {
    for (int y = y0; y <= y1; ++y) hline(x0, x1, y, v);
  }

 private:
  Image& img_;
};

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

void draw_axes(Canvas& cv, int pw, int ph) {
  cv.vline(1, 1, ph - 2, 0.6f);
  cv.hline(1, pw - 1, ph - 2, 0.6f);
}

void draw_graph(Canvas& cv, int pw, int ph, int count, Rng& rng) {
  draw_axes(cv, pw, ph);
  const double cycles = count + 1;
  const double amp = rng.uniform(0.25, 0.4) * ph;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double center = ph / 2.0 - 1.0;
  int prev = -1;
  for (int x = 2; x < pw; ++x) {
    const int y = static_cast<int>(std::lround(center + amp * std::sin(2.0 * std::numbers::pi * cycles * x / pw + phase)));
    const int yc = std::clamp(y, 0, ph - 3);
    if (prev < 0) prev = yc;
    cv.vline(x, prev, yc, 0.95f);
    prev = yc;
  }
}

void draw_scatter(Canvas& cv, int pw, int ph, int count, Rng& rng) {
  draw_axes(cv, pw, ph);
  const int dots = 6 + 4 * count;
  for (int i = 0; i < dots; ++i) {
    const int x = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, pw - 5))));
    const int y = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, ph - 5))));
    cv.fill(x, y, x + 1, y + 1, 0.95f);
  }
}

void draw_nodes(Canvas& cv, int pw, int ph, int count, Rng& rng) {
  const int boxes = count + 2;
  const int cols = 3, rows = 2;
  std::vector<int> cells(cols * rows);
  for (int i = 0; i < cols * rows; ++i) cells[i] = i;
  rng.shuffle(cells);
  const int cw = pw / cols, rh = ph / rows;
  int px = -1, py = -1;
  for (int b = 0; b < boxes; ++b) {
    const int cx = cells[b] % cols, cy = cells[b] / cols;
    const int x0 = cx * cw + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, cw - 7))));
    const int y0 = cy * rh + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, rh - 6))));
    const int x1 = x0 + 5, y1 = y0 + 4;
    cv.hline(x0, x1, y0, 0.9f);
    cv.hline(x0, x1, y1, 0.9f);
    cv.vline(x0, y0, y1, 0.9f);
    cv.vline(x1, y0, y1, 0.9f);
    const int mx = (x0 + x1) / 2, my = (y0 + y1) / 2;
    if (px >= 0) {
      cv.hline(px, mx, py, 0.6f);
      cv.vline(mx, py, my, 0.6f);
    }
    px = mx;
    py = my;
  }
}

void draw_equation(Canvas& cv, int pw, int ph, int count, Rng& rng) {
  const int lines = count + 2;
  const int spacing = std::max(2, (ph - 2) / lines);
  for (int r = 0; r < lines; ++r) {
    const int y = 1 + r * spacing + spacing / 2;
    int x = 1 + static_cast<int>(rng.below(4));
    const int end = pw - 1 - static_cast<int>(rng.below(6));
    while (x < end) {
      const int len = 1 + static_cast<int>(rng.below(3));
      cv.hline(x, std::min(x + len - 1, end), y, 0.85f);
      if (rng.below(3) == 0) cv.vline(x, y - 1, y + 1, 0.85f);
      x += len + 1;
    }
  }
}

void draw_bars(Canvas& cv, int pw, int ph, int count, Rng& rng) {
  draw_axes(cv, pw, ph);
  const int bars = count + 2;
  const int slot = (pw - 4) / bars;
  const int width = std::max(1, slot - 2);
  for (int b = 0; b < bars; ++b) {
    const int x0 = 3 + b * slot;
    const int h = static_cast<int>(std::lround(rng.uniform(0.3, 0.9) * (ph - 3)));
    cv.fill(x0, ph - 3 - h, x0 + width - 1, ph - 3, 0.7f);
  }
}

float legend_level(int cell, const FigureParams& p) {
  switch (cell) {
    case 0: return 0.2f + 0.2f * static_cast<float>(p.count);
    case 1: return 0.2f + 0.3f * static_cast<float>(p.quantity);
    case 2: return p.has_ocr ? 0.8f : 0.2f;
    default: return p.has_mention ? 0.8f : 0.2f;
  }
}

std::string synth_caption(const FigureParams& p) {
  const std::string q(kQuantities[p.quantity]);
  const std::string n(kCountWords[p.count]);
  switch (p.type) {
    case FigureType::GraphPlot: return capitalize(q) + " versus time over " + n + " oscillation periods.";
    case FigureType::Scatterplot: return "Measured " + q + " values scattered across " + n + " sample batches.";
    case FigureType::NodeDiagram: return "Block diagram linking " + n + " " + q + " control modules.";
    case FigureType::Equation: return "Governing equations for the " + q + " model in " + n + " lines.";
    case FigureType::BarChart: return "Average " + q + " compared across " + n + " experimental groups.";
  }
  return {};
}

std::vector<std::string> synth_ocr(const FigureParams& p) {
  const std::string q(kQuantities[p.quantity]);
  const std::string unit = std::string("(") + std::string(kUnits[p.quantity]) + ")";
  switch (p.type) {
    case FigureType::GraphPlot: return {"time (s)", q + " " + unit};
    case FigureType::Scatterplot: return {"sample index", q + " " + unit};
    case FigureType::NodeDiagram: return {"input", q + " controller", "output"};
    case FigureType::Equation: return {q + " balance", "boundary terms"};
    case FigureType::BarChart: return {"group", "mean " + q + " " + unit};
  }
  return {};
}

std::string synth_mention(const FigureParams& p) {
  return "The " + std::string(kTypeNouns[static_cast<int>(p.type)]) + " in the figure reports " +
         std::string(kQuantities[p.quantity]) + " across " + std::string(kCountWords[p.count]) +
         " settings of our experiment.";
}

// Exactly round(n * fraction) flags set, positions chosen by `rng`.
std::vector<bool> balanced_flags(std::size_t n, double fraction, Rng& rng) {
  fraction = std::clamp(fraction, 0.0, 1.0);
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<bool> flags(n, false);
  std::fill(flags.begin(), flags.begin() + static_cast<std::ptrdiff_t>(k), true);
  rng.shuffle(flags);
  return flags;
}

std::string padded_id(std::string_view prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << '-';
  os.width(6);
  os.fill('0');
  os << i;
  return os.str();
}

}  // namespace

Image render_synthetic_figure(const FigureParams& params, std::uint64_t seed, const ImageGeometry& geometry) {
  Image img(geometry.width, geometry.height, geometry.channels);
  Rng rng(seed);
  for (float& v : img.data) v = static_cast<float>(0.05 + 0.06 * rng.uniform());
  Canvas cv(img);
  const int legend_h = geometry.height / 4;
  const int ph = geometry.height - legend_h;
  const int pw = geometry.width;
  switch (params.type) {
    case FigureType::GraphPlot: draw_graph(cv, pw, ph, params.count, rng); break;
    case FigureType::Scatterplot: draw_scatter(cv, pw, ph, params.count, rng); break;
    case FigureType::NodeDiagram: draw_nodes(cv, pw, ph, params.count, rng); break;
    case FigureType::Equation: draw_equation(cv, pw, ph, params.count, rng); break;
    case FigureType::BarChart: draw_bars(cv, pw, ph, params.count, rng); break;
  }
  const int cell_w = geometry.width / 4;
  for (int cell = 0; cell < 4; ++cell) {
    const float level = legend_level(cell, params);
    cv.fill(cell * cell_w + 1, ph + 1, (cell + 1) * cell_w - 2, geometry.height - 2, level);
  }
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

std::vector<FigureRecord> synth_figure_corpus(std::size_t n, std::uint64_t seed, const FigureSynthOptions& options) {
  if (n == 0) throw Error("synth_figure_corpus: n must be at least 1");
  Rng rng(seed);
  std::vector<FigureType> types(n);
  for (std::size_t i = 0; i < n; ++i) types[i] = kFigureTypes[i % kFigureTypes.size()];
  rng.shuffle(types);
  const auto ocr_flags = balanced_flags(n, options.ocr_fraction, rng);
  const auto mention_flags = balanced_flags(n, options.mention_fraction, rng);

  std::vector<FigureRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    FigureParams p;
    p.type = types[i];
    p.count = static_cast<int>(rng.below(4));
    p.quantity = static_cast<int>(rng.below(3));
    p.has_ocr = ocr_flags[i];
    p.has_mention = mention_flags[i];
    FigureRecord rec;
    rec.id = padded_id("fig", i);
    rec.figure_type = p.type;
    rec.image = render_synthetic_figure(p, Rng::derive(seed, i), options.geometry);
    rec.caption = synth_caption(p);
    if (p.has_ocr) rec.ocr = synth_ocr(p);
    if (p.has_mention) rec.mention = synth_mention(p);
    rec.category = std::string(kArxivCategories[rng.below(kArxivCategories.size())]);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic QA

namespace {

struct WordGroup {
  std::string_view name;
  std::array<std::string_view, 4> members;
};

constexpr std::array<WordGroup, 12> kGroups = {{
    {"animals", {"dog", "cat", "horse", "sparrow"}},
    {"metals", {"iron", "copper", "zinc", "silver"}},
    {"colors", {"red", "blue", "green", "yellow"}},
    {"planets", {"mars", "venus", "jupiter", "saturn"}},
    {"tools", {"hammer", "saw", "wrench", "drill"}},
    {"fruits", {"apple", "mango", "pear", "plum"}},
    {"oceans", {"atlantic", "pacific", "indian", "arctic"}},
    {"instruments", {"violin", "flute", "drum", "harp"}},
    {"gases", {"oxygen", "helium", "neon", "argon"}},
    {"shapes", {"circle", "square", "triangle", "hexagon"}},
    {"rocks", {"granite", "basalt", "marble", "slate"}},
    {"feelings", {"joy", "anger", "fear", "pride"}},
}};

std::string lecture_text(std::size_t lecture) {
  const auto& g = kGroups[lecture % kGroups.size()];
  return "Unit " + std::to_string(lecture + 1) + " is about " + std::string(g.name) +
         ". Words in one group share a common trait.";
}

// Lecture per record: every lecture once, the remainder drawn with weights
// halving from one lecture to the next so frequencies are strongly skewed.
std::vector<std::size_t> assign_lectures(std::size_t n, std::size_t n_lectures, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n_lectures; ++i) out.push_back(i);
  std::vector<double> cdf(n_lectures);
  double total = 0.0, w = 1.0;
  for (std::size_t i = 0; i < n_lectures; ++i, w *= 0.5) cdf[i] = (total += w);
  for (std::size_t i = n_lectures; i < n; ++i) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    out.push_back(std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), n_lectures - 1));
  }
  rng.shuffle(out);
  return out;
}

// Places `correct` at `answer` among `distractors` (already distinct from it).
std::vector<std::string> arrange_choices(const std::string& correct, std::vector<std::string> distractors,
                                         std::size_t n_choices, std::size_t answer) {
  distractors.resize(n_choices - 1);
  distractors.insert(distractors.begin() + static_cast<std::ptrdiff_t>(answer), correct);
  return distractors;
}

std::vector<std::string> other_group_words(std::size_t group, Rng& rng) {
  std::vector<std::size_t> groups;
  for (std::size_t g = 0; g < kGroups.size(); ++g) {
    if (g != group) groups.push_back(g);
  }
  rng.shuffle(groups);
  std::vector<std::string> words;
  for (std::size_t g : groups) words.emplace_back(kGroups[g].members[rng.below(4)]);
  return words;
}

}  // namespace

std::vector<QARecord> synth_qa_corpus(std::size_t n, std::size_t n_lectures, std::uint64_t seed,
                                      const ImageGeometry& geometry) {
  if (n_lectures == 0) throw Error("synth_qa_corpus: n_lectures must be at least 1");
  if (n_lectures > n) {
    throw Error("synth_qa_corpus: n_lectures (" + std::to_string(n_lectures) + ") exceeds n (" +
                std::to_string(n) + ")");
  }
  Rng rng(seed);
  const auto lectures = assign_lectures(n, n_lectures, rng);
  std::vector<QARecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lecture = lectures[i];
    const std::size_t group = lecture % kGroups.size();
    const auto& g = kGroups[group];
    QARecord rec;
    rec.id = padded_id("qa", i);
    rec.subject = static_cast<Subject>(i % 3);
    rec.grade = static_cast<int>(i % 12) + 1;
    rec.topic = std::string(g.name);
    rec.lecture = lecture_text(lecture);

    // 0: no context, 1: text, 2: image, 3: text and image.
    const double u = rng.uniform();
    const int kind = u < 0.4 ? 0 : u < 0.75 ? 1 : u < 0.9 ? 2 : 3;
    const std::size_t n_choices = 2 + rng.below(4);
    const std::size_t answer = rng.below(n_choices);
    rec.answer_index = static_cast<int>(answer);

    if (kind == 0) {
      const std::string correct(g.members[rng.below(4)]);
      rec.question = "Which word names one of the " + std::string(g.name) + "?";
      rec.choices = arrange_choices(correct, other_group_words(group, rng), n_choices, answer);
      rec.solution = capitalize(correct) + " is one of the " + std::string(g.name) + ".";
    } else if (kind == 1) {
      std::vector<std::string> same(g.members.begin(), g.members.end());
      rng.shuffle(same);
      const std::string correct = same.front();
      std::vector<std::string> distractors(same.begin() + 1, same.end());
      for (auto& w : other_group_words(group, rng)) distractors.push_back(std::move(w));
      rec.question = "Which word matches the label of the sample?";
      rec.context_text = "The sample was labeled " + correct + ".";
      rec.choices = arrange_choices(correct, std::move(distractors), n_choices, answer);
      rec.solution = "The context says the sample was labeled " + correct + ".";
    } else {
      FigureParams p;
      p.type = kFigureTypes[rng.below(kFigureTypes.size())];
      p.count = static_cast<int>(rng.below(4));
      p.quantity = static_cast<int>(rng.below(3));
      p.has_ocr = rng.below(2) == 1;
      p.has_mention = rng.below(2) == 1;
      rec.context_image = render_synthetic_figure(p, Rng::derive(seed, 1'000'000 + i), geometry);
      std::vector<std::string> distractors;
      for (FigureType t : kFigureTypes) {
        if (t != p.type) distractors.emplace_back(display_name(t));
      }
      rng.shuffle(distractors);
      const std::string correct(display_name(p.type));
      rec.question = "Which type of figure is shown?";
      rec.choices = arrange_choices(correct, std::move(distractors), n_choices, answer);
      rec.solution = "The image shows a " + correct + ".";
      if (kind == 3) rec.context_text = "The figure comes from a study of " + std::string(g.name) + ".";
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

CorpusSplit make_split(const std::vector<std::string>& ids, const std::array<double, 3>& fractions,
                       std::uint64_t seed) {
  if (ids.empty()) throw Error("make_split: no ids");
  for (double f : fractions) {
    if (!(f >= 0.0)) throw Error("make_split: fractions must be non-negative");
  }
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error("make_split: fractions sum to " + std::to_string(sum) + ", expected 1");
  }
  std::vector<std::string> order = ids;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = order.size();
  const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fractions[0] * n)));
  const auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
  CorpusSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                          order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return split;
}

void save_split(const fs::path& path, const CorpusSplit& split, std::string_view meta_json) {
  ordered_json obj;
  if (!meta_json.empty()) obj["_meta"] = ordered_json::parse(meta_json);
  obj["train"] = split.train;
  obj["validation"] = split.validation;
  obj["test"] = split.test;
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << obj.dump(2) << '\n';
}

CorpusSplit load_split(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    const json obj = json::parse(in);
    CorpusSplit split;
    split.train = obj.at("train").get<std::vector<std::string>>();
    split.validation = obj.at("validation").get<std::vector<std::string>>();
    split.test = obj.at("test").get<std::vector<std::string>>();
    return split;
  } catch (const json::exception& e) {
    throw Error("malformed split file " + path.string() + ": " + e.what());
  }
}

}  // namespace scitune
