#include "scitune/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"
#include "scitune/error.hpp"
#include "scitune/hash.hpp"

namespace scitune {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// TOML subset

namespace {

class TomlParser {
 public:
  TomlParser(std::string_view line, std::size_t lineno) : s_(line), line_(lineno) {}

  [[noreturn]] void fail(const std::string& why) const {
    throw Error("config line " + std::to_string(line_) + ": " + why);
  }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  bool at_end() {
    skip_ws();
    return pos_ >= s_.size() || s_[pos_] == '#';
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

  std::string key() {
    skip_ws();
    std::string out;
    while (true) {
      const std::size_t start = pos_;
      while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '-')) {
        ++pos_;
      }
      if (pos_ == start) fail("expected a key");
      out.append(s_.substr(start, pos_ - start));
      skip_ws();
      if (peek() != '.') break;
      ++pos_;
      out.push_back('.');
      skip_ws();
    }
    return out;
  }

  void expect(char c) {
    skip_ws();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  TomlValue value() {
    skip_ws();
    TomlValue v;
    v.line = line_;
    const char c = peek();
    if (c == '"') {
      v.kind = TomlValue::Kind::String;
      v.s = basic_string();
    } else if (c == '\'') {
      v.kind = TomlValue::Kind::String;
      ++pos_;
      const std::size_t end = s_.find('\'', pos_);
      if (end == std::string_view::npos) fail("unterminated string");
      v.s = std::string(s_.substr(pos_, end - pos_));
      pos_ = end + 1;
    } else if (c == '[') {
      v.kind = TomlValue::Kind::Array;
      ++pos_;
      skip_ws();
      while (peek() != ']') {
        v.items.push_back(value());
        skip_ws();
        if (peek() == ',') {
          ++pos_;
          skip_ws();
        } else if (peek() != ']') {
          fail("expected ',' or ']' in array");
        }
      }
      ++pos_;
    } else if (s_.substr(pos_).starts_with("true")) {
      v.kind = TomlValue::Kind::Bool;
      v.b = true;
      pos_ += 4;
    } else if (s_.substr(pos_).starts_with("false")) {
      v.kind = TomlValue::Kind::Bool;
      pos_ += 5;
    } else {
      number(v);
    }
    return v;
  }

 private:
  std::string basic_string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char ch = s_[pos_++];
      if (ch == '\\') {
        if (pos_ >= s_.size()) break;
        const char e = s_[pos_++];
        switch (e) {
          case 'n': ch = '\n'; break;
          case 't': ch = '\t'; break;
          case '"': ch = '"'; break;
          case '\\': ch = '\\'; break;
          default: fail(std::string("unsupported escape '\\") + e + "'");
        }
      }
      out.push_back(ch);
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  void number(TomlValue& v) {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '+' ||
                                s_[pos_] == '-' || s_[pos_] == '.' || s_[pos_] == '_')) {
      ++pos_;
    }
    std::string text;
    for (char ch : s_.substr(start, pos_ - start)) {
      if (ch != '_') text.push_back(ch);
    }
    if (text.empty()) fail("expected a value");
    const bool is_float = text.find_first_of(".eE") != std::string::npos;
    const char* first = text.data() + (text[0] == '+' ? 1 : 0);
    const char* last = text.data() + text.size();
    if (is_float) {
      v.kind = TomlValue::Kind::Float;
      auto [p, ec] = std::from_chars(first, last, v.f);
      if (ec != std::errc() || p != last) fail("invalid number '" + text + "'");
    } else {
      v.kind = TomlValue::Kind::Int;
      auto [p, ec] = std::from_chars(first, last, v.i);
      if (ec != std::errc() || p != last) fail("invalid value '" + text + "'");
    }
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

}  // namespace

std::map<std::string, TomlValue> parse_toml(std::string_view text) {
  std::map<std::string, TomlValue> out;
  std::set<std::string> tables;
  std::string table;
  std::size_t lineno = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    start = end + 1;
    ++lineno;
    TomlParser p(line, lineno);
    if (p.at_end()) continue;
    if (p.peek() == '[') {
      p.expect('[');
      table = p.key();
      p.expect(']');
      if (!p.at_end()) p.fail("unexpected text after table header");
      if (!tables.insert(table).second) p.fail("duplicate table [" + table + "]");
      continue;
    }
    const std::string key = (table.empty() ? "" : table + ".") + p.key();
    p.expect('=');
    TomlValue v = p.value();
    if (!p.at_end()) p.fail("unexpected text after value");
    if (!out.emplace(key, std::move(v)).second) p.fail("duplicate key '" + key + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run config

namespace {

class Reader {
 public:
  explicit Reader(std::map<std::string, TomlValue> values) : values_(std::move(values)) {}

  const TomlValue* find(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  [[noreturn]] static void type_error(const std::string& key, const TomlValue& v, const char* want) {
    throw Error("config line " + std::to_string(v.line) + ": '" + key + "' must be " + want);
  }

  static_assert(std::is_same_v<std::size_t, std::uint64_t>);
  void read(const std::string& key, std::size_t& dst) {
    if (const TomlValue* v = find(key)) {
      if (v->kind != TomlValue::Kind::Int || v->i < 0) type_error(key, *v, "a non-negative integer");
      dst = static_cast<std::size_t>(v->i);
    }
  }
  void read(const std::string& key, int& dst) {
    if (const TomlValue* v = find(key)) {
      if (v->kind != TomlValue::Kind::Int) type_error(key, *v, "an integer");
      dst = static_cast<int>(v->i);
    }
  }
  void read(const std::string& key, double& dst) {
    if (const TomlValue* v = find(key)) dst = number(key, *v);
  }
  void read(const std::string& key, bool& dst) {
    if (const TomlValue* v = find(key)) {
      if (v->kind != TomlValue::Kind::Bool) type_error(key, *v, "true or false");
      dst = v->b;
    }
  }
  void read(const std::string& key, std::string& dst) {
    if (const TomlValue* v = find(key)) {
      if (v->kind != TomlValue::Kind::String) type_error(key, *v, "a string");
      dst = v->s;
    }
  }
  void read(const std::string& key, std::array<double, 3>& dst) {
    if (const TomlValue* v = find(key)) {
      if (v->kind != TomlValue::Kind::Array || v->items.size() != 3) type_error(key, *v, "an array of three numbers");
      for (std::size_t i = 0; i < 3; ++i) dst[i] = number(key, v->items[i]);
    }
  }
  void read(const std::string& key, std::optional<double>& dst) {
    if (const TomlValue* v = find(key)) dst = number(key, *v);
  }

  void reject_unknown() const {
    for (const auto& [key, v] : values_) {
      if (!used_.count(key)) {
        throw Error("config line " + std::to_string(v.line) + ": unknown config key '" + key + "'");
      }
    }
  }

 private:
  static double number(const std::string& key, const TomlValue& v) {
    if (v.kind == TomlValue::Kind::Float) return v.f;
    if (v.kind == TomlValue::Kind::Int) return static_cast<double>(v.i);
    type_error(key, v, "a number");
  }

  std::map<std::string, TomlValue> values_;
  std::set<std::string> used_;
};

void read_train(Reader& r, const std::string& table, TrainConfig& tc) {
  r.read(table + ".epochs", tc.epochs);
  r.read(table + ".batch_size", tc.batch_size);
  r.read(table + ".lr", tc.lr);
  r.read(table + ".max_len", tc.max_len);
  r.read(table + ".clip", tc.clip);
  std::string opt = tc.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  r.read(table + ".optimizer", opt);
  if (opt == "sgd") {
    tc.optimizer = OptimizerKind::Sgd;
  } else if (opt == "adam") {
    tc.optimizer = OptimizerKind::Adam;
  } else {
    throw Error("'" + table + ".optimizer' must be \"sgd\" or \"adam\", got \"" + opt + "\"");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

ordered_json train_json(const TrainConfig& tc) { return ordered_json::parse(to_json_string(tc)); }

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.align.stage = Stage::Align;
  c.align.epochs = 1;
  c.task.stage = Stage::Task;
  c.task.epochs = 12;
  return c;
}

RunConfig parse_run_config(std::string_view toml_text, const fs::path& base_dir) {
  Reader r(parse_toml(toml_text));
  RunConfig c = default_run_config();
  r.read("seed", c.seed);
  std::string out = c.out.string();
  r.read("out", out);
  c.out = out;

  DataConfig& d = c.data;
  r.read("data.figures", d.figures);
  r.read("data.qa", d.qa);
  r.read("data.qa_lectures", d.qa_lectures);
  r.read("data.ocr_fraction", d.ocr_fraction);
  r.read("data.mention_fraction", d.mention_fraction);
  std::string figure_jsonl, qa_jsonl;
  r.read("data.figure_jsonl", figure_jsonl);
  r.read("data.qa_jsonl", qa_jsonl);
  if (!figure_jsonl.empty()) d.figure_jsonl = resolve(base_dir, figure_jsonl);
  if (!qa_jsonl.empty()) d.qa_jsonl = resolve(base_dir, qa_jsonl);
  r.read("data.figure_split", d.figure_split);
  r.read("data.qa_split", d.qa_split);

  r.read("vocab.max_size", c.vocab_max_size);

  ModelConfig& m = c.model;
  r.read("model.d_v", m.d_v);
  r.read("model.d_m", m.d_m);
  r.read("model.n_layers", m.n_layers);
  r.read("model.n_heads", m.n_heads);
  r.read("model.ffn_mult", m.ffn_mult);
  r.read("model.max_len", m.max_len);
  r.read("model.patch", m.patch);
  r.read("model.image_width", m.image.width);
  r.read("model.image_height", m.image.height);
  r.read("model.image_channels", m.image.channels);
  r.read("model.encoder_attention", m.encoder_attention);
  r.read("model.ln_eps", m.ln_eps);

  read_train(r, "align", c.align);
  read_train(r, "task", c.task);
  r.read("task.include_figures", c.task_include_figures);

  r.read("generate.max_new_tokens", c.generate.max_new_tokens);
  r.read("generate.temperature", c.generate.temperature);

  r.reject_unknown();
  validate(c);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  return parse_run_config(buf.str(), base);
}

void validate(const RunConfig& c) {
  auto check_split = [](const std::array<double, 3>& s, const char* name) {
    for (double f : s) {
      if (f < 0.0) throw Error(std::string(name) + " fractions must be non-negative");
    }
    if (std::abs(s[0] + s[1] + s[2] - 1.0) > 1e-9) throw Error(std::string(name) + " fractions must sum to 1");
  };
  check_split(c.data.figure_split, "data.figure_split");
  check_split(c.data.qa_split, "data.qa_split");
  if (c.data.ocr_fraction < 0.0 || c.data.ocr_fraction > 1.0) throw Error("data.ocr_fraction must be in [0, 1]");
  if (c.data.mention_fraction < 0.0 || c.data.mention_fraction > 1.0) throw Error("data.mention_fraction must be in [0, 1]");
  if (c.vocab_max_size < 8) throw Error("vocab.max_size must be at least 8");
  ModelConfig m = c.model;
  m.vocab_size = c.vocab_max_size;
  validate(m);
  validate(c.align);
  validate(c.task);
  if (c.align.max_len > m.max_len || c.task.max_len > m.max_len) {
    throw Error("training max_len exceeds model.max_len");
  }
  if (c.generate.temperature < 0.0) throw Error("generate.temperature must be >= 0");
}

std::string run_config_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out"] = c.out.generic_string();
  ordered_json d;
  d["figures"] = c.data.figures;
  d["qa"] = c.data.qa;
  d["qa_lectures"] = c.data.qa_lectures;
  d["ocr_fraction"] = c.data.ocr_fraction;
  d["mention_fraction"] = c.data.mention_fraction;
  d["figure_jsonl"] = c.data.figure_jsonl ? ordered_json(c.data.figure_jsonl->generic_string()) : ordered_json(nullptr);
  d["qa_jsonl"] = c.data.qa_jsonl ? ordered_json(c.data.qa_jsonl->generic_string()) : ordered_json(nullptr);
  d["figure_split"] = c.data.figure_split;
  d["qa_split"] = c.data.qa_split;
  j["data"] = d;
  j["vocab"] = {{"max_size", c.vocab_max_size}};
  const ModelConfig& m = c.model;
  j["model"] = {{"d_v", m.d_v},
                {"d_m", m.d_m},
                {"n_layers", m.n_layers},
                {"n_heads", m.n_heads},
                {"ffn_mult", m.ffn_mult},
                {"max_len", m.max_len},
                {"patch", m.patch},
                {"image_width", m.image.width},
                {"image_height", m.image.height},
                {"image_channels", m.image.channels},
                {"encoder_attention", m.encoder_attention},
                {"ln_eps", m.ln_eps}};
  j["align"] = train_json(c.align);
  ordered_json task = train_json(c.task);
  task["include_figures"] = c.task_include_figures;
  j["task"] = task;
  j["generate"] = {{"max_new_tokens", c.generate.max_new_tokens}, {"temperature", c.generate.temperature}};
  return j.dump();
}

std::string config_hash(const RunConfig& c) {
  // Where a run writes is not part of what it computes.
  ordered_json j = ordered_json::parse(run_config_json(c));
  j.erase("out");
  return sha256_hex(j.dump());
}

}  // namespace scitune
