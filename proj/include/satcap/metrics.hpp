#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satcap/errors.hpp"
#include "satcap/vocab.hpp"

namespace satcap {

struct EvalItem {
  std::string id;
  std::string hypothesis;
  std::vector<std::string> references;
};

using EvalCorpus = std::vector<EvalItem>;

// Fractions in [0, 1] except cider_d in [0, 10].
struct MetricReport {
  std::size_t pairs = 0;
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider_d = 0.0;
  double composite = 0.0;
  std::vector<std::string> warnings;

  // Display form: every value x100.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["pairs"] = pairs;
    for (std::size_t n = 0; n < 4; ++n) j["bleu" + std::to_string(n + 1)] = bleu[n] * 100.0;
    j["rouge_l"] = rouge_l * 100.0;
    j["cider_d"] = cider_d * 100.0;
    j["composite"] = composite * 100.0;
    if (!warnings.empty()) j["warnings"] = warnings;
    return j;
  }
};

struct CompositeWeights {
  double bleu4 = 1.0;
  double rouge_l = 1.0;
  double cider_d = 1.0;  // applied to cider_d / 10
};

namespace metrics_detail {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::string, std::size_t>;

inline NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    std::string key = t[i];
    for (std::size_t k = 1; k < n; ++k) key += '\x1f' + t[i + k];
    ++out[key];
  }
  return out;
}

inline void check_corpus(const EvalCorpus& corpus, const char* what) {
  if (corpus.empty()) throw EmptyInputError(std::string(what) + ": empty hypothesis set");
  for (const auto& item : corpus) {
    if (item.references.empty()) throw ContractError(std::string(what) + ": item '" + item.id + "' has no references");
  }
}

// Order-independent sum: the same multiset of terms always gives the same
// bits, which keeps corpus scores invariant under reordering.
inline double stable_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace metrics_detail

// Corpus BLEU-1..n_max: clipped n-gram matches and candidate counts summed
// over the corpus, closest-reference-length brevity penalty, no smoothing.
inline std::array<double, 4> bleu(const EvalCorpus& corpus, std::size_t n_max = 4) {
  using namespace metrics_detail;
  check_corpus(corpus, "bleu");
  if (n_max == 0 || n_max > 4) throw ConfigError("bleu: n_max must be in [1, 4]");
  std::array<std::size_t, 4> matched{}, total{};
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto& item : corpus) {
    const auto hyp = tokenize(item.hypothesis);
    std::vector<Tokens> refs;
    for (const auto& r : item.references) refs.push_back(tokenize(r));
    hyp_len += hyp.size();
    // Closest reference length; ties prefer the shorter reference.
    std::size_t best = refs[0].size();
    for (const auto& r : refs) {
      const auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += best;
    for (std::size_t n = 1; n <= n_max; ++n) {
      const auto h = ngrams(hyp, n);
      NgramCounts max_ref;
      for (const auto& r : refs)
        for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
      for (const auto& [g, c] : h) {
        total[n - 1] += c;
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  std::array<double, 4> out{};
  if (hyp_len == 0) return out;
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= n_max; ++n) {
    if (matched[n - 1] == 0) break;  // this and every higher order stay 0
    log_sum += std::log(static_cast<double>(matched[n - 1]) / static_cast<double>(total[n - 1]));
    out[n - 1] = bp * std::exp(log_sum / static_cast<double>(n));
  }
  return out;
}

inline double rouge_l_sentence(const std::string& hypothesis, const std::vector<std::string>& references, double beta = 1.2) {
  const auto hyp = tokenize(hypothesis);
  double best = 0.0;
  for (const auto& r : references) {
    const auto ref = tokenize(r);
    if (hyp.empty() || ref.empty()) continue;
    const auto lcs = static_cast<double>(metrics_detail::lcs_length(hyp, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(hyp.size());
    const double rec = lcs / static_cast<double>(ref.size());
    best = std::max(best, (1.0 + beta * beta) * p * rec / (rec + beta * beta * p));
  }
  return best;
}

// Per item: best F_beta over its references; corpus value is the mean.
inline double rouge_l(const EvalCorpus& corpus, double beta = 1.2) {
  metrics_detail::check_corpus(corpus, "rouge_l");
  std::vector<double> per;
  for (const auto& item : corpus) per.push_back(rouge_l_sentence(item.hypothesis, item.references, beta));
  return metrics_detail::stable_sum(per) / static_cast<double>(corpus.size());
}

// CIDEr-D. Document frequencies count image pairs whose reference set holds
// the n-gram; weights are raw term frequency x (log #pairs - log max(1, df)).
// Per n: clipped similarity sum_g min(h_g, r_g) r_g / (|h||r|) times
// exp(-(len_h - len_r)^2 / (2 sigma^2)), averaged over references; the item
// score is the mean over n = 1..4 times 10, the corpus score the item mean.
inline double cider_d(const EvalCorpus& corpus, std::vector<std::string>* warnings = nullptr, double sigma = 6.0) {
  using namespace metrics_detail;
  check_corpus(corpus, "cider_d");
  if (corpus.size() == 1 && warnings) {
    warnings->push_back("cider_d: single image pair, every idf is zero so the score is 0");
  }
  std::array<std::map<std::string, std::size_t>, 4> df;
  for (const auto& item : corpus) {
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::string, bool> seen;
      for (const auto& r : item.references)
        for (const auto& [g, c] : ngrams(tokenize(r), n)) seen[g] = true;
      for (const auto& [g, b] : seen) ++df[n - 1][g];
    }
  }
  const double log_docs = std::log(static_cast<double>(corpus.size()));
  struct Vec {
    std::array<std::map<std::string, double>, 4> w;
    std::array<double, 4> norm_sq{};
    std::size_t length = 0;
  };
  auto vectorize = [&](const Tokens& t) {
    Vec v;
    v.length = t.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      double sq = 0.0;
      for (const auto& [g, c] : ngrams(t, n)) {
        const auto it = df[n - 1].find(g);
        const double d = it == df[n - 1].end() ? 1.0 : static_cast<double>(std::max<std::size_t>(1, it->second));
        const double w = static_cast<double>(c) * (log_docs - std::log(d));
        v.w[n - 1][g] = w;
        sq += w * w;
      }
      v.norm_sq[n - 1] = sq;
    }
    return v;
  };
  std::vector<double> per;
  for (const auto& item : corpus) {
    const auto h = vectorize(tokenize(item.hypothesis));
    std::array<double, 4> acc{};
    for (const auto& rs : item.references) {
      const auto r = vectorize(tokenize(rs));
      const double delta = static_cast<double>(h.length) - static_cast<double>(r.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (std::size_t n = 0; n < 4; ++n) {
        double dot = 0.0;
        for (const auto& [g, hw] : h.w[n]) {
          const auto it = r.w[n].find(g);
          if (it != r.w[n].end()) dot += std::min(hw, it->second) * it->second;
        }
        // One square root of the product keeps a vector's cosine with itself
        // at exactly 1.
        if (h.norm_sq[n] != 0.0 && r.norm_sq[n] != 0.0) dot /= std::sqrt(h.norm_sq[n] * r.norm_sq[n]);
        acc[n] += dot * penalty;
      }
    }
    const double mean_n = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
    per.push_back(mean_n / static_cast<double>(item.references.size()) * 10.0);
  }
  return stable_sum(per) / static_cast<double>(corpus.size());
}

// Weighted mean of BLEU-4, ROUGE-L and CIDEr-D / 10.
inline double composite(const MetricReport& r, const CompositeWeights& w = {}) {
  const double total = w.bleu4 + w.rouge_l + w.cider_d;
  if (!(total > 0.0)) throw ConfigError("composite: weights must sum to a positive value");
  return (w.bleu4 * r.bleu[3] + w.rouge_l * r.rouge_l + w.cider_d * r.cider_d / 10.0) / total;
}

inline MetricReport score(const EvalCorpus& corpus, const CompositeWeights& w = {}) {
  MetricReport r;
  r.pairs = corpus.size();
  r.bleu = bleu(corpus);
  r.rouge_l = rouge_l(corpus);
  r.cider_d = cider_d(corpus, &r.warnings);
  r.composite = composite(r, w);
  return r;
}

// ---------------------------------------------------------------------------
// JSON-lines: {"id", "hypothesis", "references": [...]} per line.

inline void write_jsonl(std::ostream& os, const EvalCorpus& corpus) {
  for (const auto& item : corpus) {
    nlohmann::json j{{"id", item.id}, {"hypothesis", item.hypothesis}, {"references", item.references}};
    os << j.dump() << '\n';
  }
}

inline EvalCorpus read_jsonl(std::istream& is) {
  EvalCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EvalItem item;
      item.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      item.hypothesis = j.at("hypothesis").get<std::string>();
      item.references = j.at("references").get<std::vector<std::string>>();
      if (item.references.empty()) throw LoadError("no references");
      corpus.push_back(std::move(item));
    } catch (const LoadError& e) {
      throw LoadError("jsonl line " + std::to_string(lineno) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

inline EvalCorpus read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path);
  return read_jsonl(in);
}

}  // namespace satcap
