#include "scitune/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "scitune/error.hpp"
#include "scitune/tokenizer.hpp"

namespace scitune {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Text metrics

double bleu(std::string_view hypothesis, std::string_view reference) {
  const auto hyp = split_words(hypothesis);
  const auto ref = split_words(reference);
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    std::size_t matches = 0;
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matches += std::min(c, it->second);
    }
    const std::size_t total = hyp.size() >= n ? hyp.size() - n + 1 : 0;
    double p;
    if (n == 1) {
      if (matches == 0) return 0.0;
      p = static_cast<double>(matches) / static_cast<double>(total);
    } else {
      p = static_cast<double>(matches + 1) / static_cast<double>(total + 1);
    }
    log_sum += 0.25 * std::log(p);
  }
  const double h = static_cast<double>(hyp.size()), r = static_cast<double>(ref.size());
  const double bp = h < r ? std::exp(1.0 - r / h) : 1.0;
  return bp * std::exp(log_sum);
}

double rouge_l(std::string_view hypothesis, std::string_view reference) {
  const auto hyp = split_words(hypothesis);
  const auto ref = split_words(reference);
  if (hyp.empty() || ref.empty()) return 0.0;
  std::vector<std::size_t> prev(ref.size() + 1, 0), cur(ref.size() + 1, 0);
  for (const auto& h : hyp) {
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      cur[j] = h == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[ref.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

std::optional<double> Tally::accuracy() const {
  if (total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

// Index of each gold id in `preds`; every gold id must appear exactly once
// and no prediction may refer to an unknown id.
template <class Pred, class Gold>
std::vector<const Pred*> align(const std::vector<Pred>& preds, const std::vector<Gold>& gold) {
  std::unordered_map<std::string, const Pred*> by_id;
  for (const Pred& p : preds) {
    if (!by_id.emplace(p.id, &p).second) throw Error("duplicate prediction for record '" + p.id + "'");
  }
  std::vector<const Pred*> out;
  std::unordered_set<std::string> gold_ids;
  for (const Gold& g : gold) {
    auto it = by_id.find(g.id);
    if (it == by_id.end()) throw Error("no prediction for record '" + g.id + "'");
    out.push_back(it->second);
    gold_ids.insert(g.id);
  }
  for (const Pred& p : preds) {
    if (!gold_ids.count(p.id)) throw Error("prediction for unknown record '" + p.id + "'");
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Figures

FigureTypeReport figure_type_eval(const std::vector<std::optional<FigureType>>& preds,
                                  const std::vector<FigureType>& gold) {
  if (preds.size() != gold.size()) throw Error("prediction count does not match gold count");
  std::array<Tally, 5> per;
  Tally all;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool ok = preds[i] == gold[i];
    per[static_cast<int>(gold[i])].add(ok);
    all.add(ok);
  }
  FigureTypeReport r;
  for (FigureType t : kFigureTypes) r.rows.emplace_back(std::string(display_name(t)), per[static_cast<int>(t)]);
  r.rows.emplace_back("All", all);
  return r;
}

FigureTypeReport figure_type_eval(const std::vector<FigurePrediction>& preds, const std::vector<FigureRecord>& gold) {
  const auto aligned = align(preds, gold);
  std::vector<std::optional<FigureType>> p;
  std::vector<FigureType> g;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    p.push_back(aligned[i]->parsed.figure_type);
    g.push_back(gold[i].figure_type);
  }
  return figure_type_eval(p, g);
}

std::vector<double> encoder_features(const Model& m, const Image& img) {
  Graph g(false);
  const auto& v = g.value(encode_image(g, m, img)).data();
  return {v.begin(), v.end()};
}

std::vector<FigureType> centroid_baseline(const std::vector<std::pair<FigureType, std::vector<double>>>& exemplars,
                                          const std::vector<std::vector<double>>& test) {
  if (exemplars.empty()) throw Error("centroid baseline needs exemplars");
  const std::size_t dim = exemplars.front().second.size();
  std::array<std::vector<double>, 5> proto;
  std::array<std::size_t, 5> count{};
  for (auto& p : proto) p.assign(dim, 0.0);
  for (const auto& [type, f] : exemplars) {
    if (f.size() != dim) throw Error("exemplar feature sizes differ");
    auto& p = proto[static_cast<int>(type)];
    for (std::size_t i = 0; i < dim; ++i) p[i] += f[i];
    ++count[static_cast<int>(type)];
  }
  for (FigureType t : kFigureTypes) {
    const int k = static_cast<int>(t);
    if (count[k] == 0) throw Error("no exemplar for class '" + std::string(display_name(t)) + "'");
    for (double& v : proto[k]) v /= static_cast<double>(count[k]);
  }
  std::vector<FigureType> order(kFigureTypes.begin(), kFigureTypes.end());
  std::sort(order.begin(), order.end(), [](FigureType a, FigureType b) { return display_name(a) < display_name(b); });

  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::array<double, 5> proto_norm{};
  for (int k = 0; k < 5; ++k) proto_norm[k] = norm(proto[k]);

  std::vector<FigureType> out;
  for (const auto& f : test) {
    if (f.size() != dim) throw Error("test feature size differs from the exemplars");
    const double fn = norm(f);
    std::optional<FigureType> best;
    double best_sim = 0.0;
    for (FigureType t : order) {
      const int k = static_cast<int>(t);
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += f[i] * proto[k][i];
      const double denom = fn * proto_norm[k];
      const double sim = denom > 0.0 ? dot / denom : 0.0;
      if (!best || sim > best_sim) {
        best = t;
        best_sim = sim;
      }
    }
    out.push_back(*best);
  }
  return out;
}

MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd r;
  r.n = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(var / static_cast<double>(xs.size()));
  return r;
}

CaptionReport caption_eval(const std::vector<FigurePrediction>& preds, const std::vector<FigureRecord>& gold) {
  const auto aligned = align(preds, gold);
  std::vector<double> b, r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::string hyp = aligned[i]->parsed.caption.value_or("");
    b.push_back(bleu(hyp, gold[i].caption));
    r.push_back(rouge_l(hyp, gold[i].caption));
  }
  return {mean_sd(b), mean_sd(r)};
}

// ---------------------------------------------------------------------------
// Question answering

QaReport qa_eval(const std::vector<QaPrediction>& preds, const std::vector<QARecord>& gold) {
  const auto aligned = align(preds, gold);
  std::map<std::string_view, Tally> strata;
  Tally all;
  QaReport r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const QARecord& q = gold[i];
    const bool ok = aligned[i]->parsed.answer_index == q.answer_index;
    r.correct.push_back(ok);
    all.add(ok);
    strata[subject_name(q.subject)].add(ok);
    if (q.context_text) strata["TXT"].add(ok);
    if (q.context_image) strata["IMG"].add(ok);
    if (!q.context_text && !q.context_image) strata["NO"].add(ok);
    strata[q.grade <= 6 ? "G1-6" : "G7-12"].add(ok);
  }
  for (std::string_view s : kQaStrata) r.rows.emplace_back(std::string(s), strata[s]);
  r.rows.emplace_back("Avg", all);
  return r;
}

CotReport cot_eval(const std::vector<QaPrediction>& preds, const std::vector<QARecord>& gold) {
  const auto aligned = align(preds, gold);
  struct Acc {
    double bleu = 0.0, rouge = 0.0;
    std::size_t n = 0;
  };
  std::array<std::array<Acc, 3>, 2> acc{};
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const QARecord& q = gold[i];
    const ParsedQaOutput& p = aligned[i]->parsed;
    const bool ok = p.answer_index == q.answer_index;
    const std::array<std::pair<const std::optional<std::string>*, const std::optional<std::string>*>, 2> parts = {
        std::pair{&p.lecture, &q.lecture}, std::pair{&p.solution, &q.solution}};
    for (std::size_t part = 0; part < 2; ++part) {
      const auto& [hyp, ref] = parts[part];
      if (!ref->has_value()) continue;
      const std::string h = hyp->value_or("");
      const double b = bleu(h, **ref), rl = rouge_l(h, **ref);
      for (std::size_t subset : {std::size_t{0}, ok ? std::size_t{1} : std::size_t{2}}) {
        acc[part][subset].bleu += b;
        acc[part][subset].rouge += rl;
        ++acc[part][subset].n;
      }
    }
  }
  CotReport r;
  for (std::size_t part = 0; part < 2; ++part) {
    for (std::size_t s = 0; s < 3; ++s) {
      const Acc& a = acc[part][s];
      if (a.n == 0) continue;
      const double n = static_cast<double>(a.n);
      r.cells[part][s] = TextScores{a.bleu / n, a.rouge / n, a.n};
    }
  }
  return r;
}

std::vector<FewshotRow> fewshot_eval(const std::vector<QARecord>& train, const std::vector<QARecord>& test,
                                     const std::vector<bool>& test_correct) {
  if (test.size() != test_correct.size()) throw Error("fewshot_eval: result count does not match test set");
  std::unordered_map<std::string, std::size_t> freq;
  for (const QARecord& q : train) {
    if (q.lecture) ++freq[*q.lecture];
  }
  std::vector<FewshotRow> rows;
  for (std::size_t threshold : kFewshotThresholds) {
    FewshotRow row{threshold, {}};
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::size_t f = 0;
      if (test[i].lecture) {
        auto it = freq.find(*test[i].lecture);
        if (it != freq.end()) f = it->second;
      }
      if (f <= threshold) row.tally.add(test_correct[i]);
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

ordered_json tally_json(const Tally& t) {
  ordered_json j;
  j["correct"] = t.correct;
  j["total"] = t.total;
  const auto a = t.accuracy();
  j["accuracy"] = a ? ordered_json(*a) : ordered_json(nullptr);
  return j;
}

ordered_json mean_sd_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}, {"n", m.n}}; }

std::string fixed(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

std::string pct(const Tally& t) {
  const auto a = t.accuracy();
  return a ? fixed(100.0 * *a, 2) : "-";
}

std::string pad(std::string s, std::size_t width, bool right = false) {
  if (s.size() >= width) return s;
  return right ? std::string(width - s.size(), ' ') + s : s + std::string(width - s.size(), ' ');
}

// Columns are padded to their widest cell; the first column is left-aligned.
std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows) {
    if (width.size() < row.size()) width.resize(row.size(), 0);
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += "  ";
      line += pad(row[c], width[c], c > 0);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

constexpr std::array<std::string_view, 3> kSubsets = {"All", "Correct", "Incorrect"};
constexpr std::array<std::string_view, 2> kParts = {"Lecture", "Solution"};

}  // namespace

std::string to_json(const FigureTypeReport& r) {
  ordered_json j = ordered_json::object();
  for (const auto& [name, t] : r.rows) j[name] = tally_json(t);
  return j.dump(2);
}

std::string to_json(const CaptionReport& r) {
  ordered_json j;
  j["bleu"] = mean_sd_json(r.bleu);
  j["rouge_l"] = mean_sd_json(r.rouge);
  return j.dump(2);
}

std::string to_json(const QaReport& r) {
  ordered_json j = ordered_json::object();
  for (const auto& [name, t] : r.rows) j[name] = tally_json(t);
  return j.dump(2);
}

std::string to_json(const CotReport& r) {
  ordered_json j = ordered_json::object();
  for (std::size_t part = 0; part < 2; ++part) {
    ordered_json pj = ordered_json::object();
    for (std::size_t s = 0; s < 3; ++s) {
      const auto& cell = r.cells[part][s];
      pj[std::string(kSubsets[s])] =
          cell ? ordered_json{{"bleu", cell->bleu}, {"rouge_l", cell->rouge}, {"n", cell->n}} : ordered_json(nullptr);
    }
    j[std::string(kParts[part])] = pj;
  }
  return j.dump(2);
}

std::string to_json(const std::vector<FewshotRow>& rows) {
  ordered_json j = ordered_json::array();
  for (const FewshotRow& row : rows) {
    ordered_json rj = tally_json(row.tally);
    rj["threshold"] = row.threshold;
    j.push_back(rj);
  }
  return j.dump(2);
}

std::string figure_type_table(const FigureTypeReport& trained, const std::optional<FigureTypeReport>& baseline) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back(baseline ? std::vector<std::string>{"Figure type", "N", "Centroid", "Trained"}
                          : std::vector<std::string>{"Figure type", "N", "Trained"});
  for (std::size_t i = 0; i < trained.rows.size(); ++i) {
    const auto& [name, t] = trained.rows[i];
    std::vector<std::string> row = {name, std::to_string(t.total)};
    if (baseline) row.push_back(pct(baseline->rows.at(i).second));
    row.push_back(pct(t));
    rows.push_back(std::move(row));
  }
  return render_table(rows) +
         "Reference at 13B scale on the full caption corpus: CLIP zero-shot All 58.68, tuned All 92.42.\n";
}

std::string caption_table(const CaptionReport& r) {
  std::vector<std::vector<std::string>> rows = {
      {"Metric", "Mean", "SD", "N"},
      {"BLEU", fixed(r.bleu.mean, 4), fixed(r.bleu.sd, 4), std::to_string(r.bleu.n)},
      {"ROUGE-L", fixed(r.rouge.mean, 4), fixed(r.rouge.sd, 4), std::to_string(r.rouge.n)},
  };
  return render_table(rows) + "Reference BLEU on real captions: BLIP 0.02 +- 0.02, tuned 0.05 +- 0.03.\n";
}

std::string qa_table(const QaReport& r) {
  std::vector<std::string> head, acc, n;
  for (const auto& [name, t] : r.rows) {
    head.push_back(name);
    acc.push_back(pct(t));
    n.push_back(std::to_string(t.total));
  }
  head.insert(head.begin(), "");
  acc.insert(acc.begin(), "Accuracy");
  n.insert(n.begin(), "N");
  return render_table({head, acc, n}) +
         "Avg is micro accuracy over all questions. Reference: human 88.40, tuned 13B model 90.03.\n";
}

std::string cot_table(const CotReport& r) {
  std::vector<std::vector<std::string>> rows = {{"Field", "Subset", "BLEU", "ROUGE-L", "N"}};
  for (std::size_t part = 0; part < 2; ++part) {
    for (std::size_t s = 0; s < 3; ++s) {
      const auto& cell = r.cells[part][s];
      rows.push_back({std::string(kParts[part]), std::string(kSubsets[s]), cell ? fixed(cell->bleu, 4) : "-",
                      cell ? fixed(cell->rouge, 4) : "-", cell ? std::to_string(cell->n) : "0"});
    }
  }
  return render_table(rows);
}

std::string fewshot_table(const std::vector<FewshotRow>& rows) {
  std::vector<std::vector<std::string>> out = {{"Lecture frequency", "#Questions", "Accuracy"}};
  for (const FewshotRow& row : rows) {
    out.push_back({"<= " + std::to_string(row.threshold), std::to_string(row.tally.total), pct(row.tally)});
  }
  return render_table(out) + "Reference (7B): 75.00 at <= 5 and 81.05 at <= 50 lecture occurrences.\n";
}

}  // namespace scitune
