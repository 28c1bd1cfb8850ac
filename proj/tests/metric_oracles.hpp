#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "satcap/metrics.hpp"

// Brute-force metric oracles built from explicit n-gram lists, independent of
// the library's hashed counting.
namespace satcap::oracle {

using Words = std::vector<std::string>;
using Gram = std::vector<std::string>;

inline Words words(const std::string& s) {
  Words out;
  std::istringstream is(s);
  for (std::string w; is >> w;) {
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(w);
  }
  return out;
}

inline std::vector<Gram> all_grams(const Words& w, std::size_t n) {
  std::vector<Gram> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) out.emplace_back(w.begin() + static_cast<long>(i), w.begin() + static_cast<long>(i + n));
  return out;
}

inline std::size_t count_of(const std::vector<Gram>& gs, const Gram& g) {
  return static_cast<std::size_t>(std::count(gs.begin(), gs.end(), g));
}

inline std::vector<Gram> distinct(std::vector<Gram> gs) {
  std::sort(gs.begin(), gs.end());
  gs.erase(std::unique(gs.begin(), gs.end()), gs.end());
  return gs;
}

// Naive multiset intersection over explicit n-gram lists; BLEU-N as the
// N-th root of the product of precisions.
inline std::array<double, 4> oracle_bleu(const EvalCorpus& corpus) {
  std::array<double, 4> hit{}, all{};
  double c = 0, r = 0;
  for (const auto& item : corpus) {
    const auto h = words(item.hypothesis);
    c += static_cast<double>(h.size());
    std::vector<Words> refs;
    for (const auto& s : item.references) refs.push_back(words(s));
    std::vector<std::size_t> lens;
    for (const auto& rf : refs) lens.push_back(rf.size());
    std::sort(lens.begin(), lens.end());
    std::size_t closest = lens[0];
    for (auto len : lens) {
      const auto gap = [&](std::size_t l) { return std::abs(static_cast<long>(l) - static_cast<long>(h.size())); };
      if (gap(len) < gap(closest)) closest = len;
    }
    r += static_cast<double>(closest);
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hg = all_grams(h, n);
      all[n - 1] += static_cast<double>(hg.size());
      for (const auto& g : distinct(hg)) {
        std::size_t cap = 0;
        for (const auto& rf : refs) cap = std::max(cap, count_of(all_grams(rf, n), g));
        hit[n - 1] += static_cast<double>(std::min(count_of(hg, g), cap));
      }
    }
  }
  std::array<double, 4> out{};
  if (c == 0) return out;
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  for (std::size_t n = 1; n <= 4; ++n) {
    double prod = 1.0;
    bool zero = false;
    for (std::size_t k = 0; k < n; ++k) {
      if (hit[k] == 0) zero = true;
      else prod *= hit[k] / all[k];
    }
    out[n - 1] = zero ? 0.0 : bp * std::pow(prod, 1.0 / static_cast<double>(n));
  }
  return out;
}

inline bool is_subsequence(const Words& sub, const Words& full) {
  std::size_t j = 0;
  for (const auto& w : full) {
    if (j < sub.size() && sub[j] == w) ++j;
  }
  return j == sub.size();
}

// LCS by enumerating every subsequence of the hypothesis.
inline std::size_t brute_lcs(const Words& a, const Words& b) {
  std::size_t best = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << a.size()); ++mask) {
    Words sub;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (mask >> i & 1) sub.push_back(a[i]);
    if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
  }
  return best;
}

inline double oracle_rouge(const EvalCorpus& corpus) {
  double total = 0;
  for (const auto& item : corpus) {
    const auto h = words(item.hypothesis);
    double best = 0;
    for (const auto& s : item.references) {
      const auto rf = words(s);
      const double l = static_cast<double>(brute_lcs(h, rf));
      if (l == 0) continue;
      const double p = l / static_cast<double>(h.size()), rc = l / static_cast<double>(rf.size());
      const double b2 = 1.2 * 1.2;
      best = std::max(best, (1 + b2) * p * rc / (rc + b2 * p));
    }
    total += best;
  }
  return total / static_cast<double>(corpus.size());
}

// Step-by-step tf-idf over explicit n-gram lists.
inline double oracle_cider(const EvalCorpus& corpus) {
  const double docs = static_cast<double>(corpus.size());
  auto df = [&](const Gram& g) {
    double d = 0;
    for (const auto& item : corpus) {
      bool in = false;
      for (const auto& s : item.references) {
        const auto gs = all_grams(words(s), g.size());
        if (std::find(gs.begin(), gs.end(), g) != gs.end()) in = true;
      }
      if (in) d += 1;
    }
    return d;
  };
  struct Weighted {
    std::vector<Gram> grams;
    std::vector<double> w;
    double weight_of(const Gram& g) const {
      for (std::size_t i = 0; i < grams.size(); ++i)
        if (grams[i] == g) return w[i];
      return 0.0;
    }
    double norm() const {
      double s = 0;
      for (double x : w) s += x * x;
      return std::sqrt(s);
    }
  };
  auto weigh = [&](const Words& t, std::size_t n) {
    Weighted v;
    const auto gs = all_grams(t, n);
    for (const auto& g : distinct(gs)) {
      v.grams.push_back(g);
      v.w.push_back(static_cast<double>(count_of(gs, g)) * (std::log(docs) - std::log(std::max(1.0, df(g)))));
    }
    return v;
  };
  double total = 0;
  for (const auto& item : corpus) {
    const auto h = words(item.hypothesis);
    double item_score = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hv = weigh(h, n);
      double per_n = 0;
      for (const auto& s : item.references) {
        const auto rw = words(s);
        const auto rv = weigh(rw, n);
        double dot = 0;
        for (std::size_t i = 0; i < hv.grams.size(); ++i) {
          const double rweight = rv.weight_of(hv.grams[i]);
          dot += std::min(hv.w[i], rweight) * rweight;
        }
        const double denom = hv.norm() * rv.norm();
        const double cos = denom == 0 ? dot : dot / denom;
        const double d = static_cast<double>(h.size()) - static_cast<double>(rw.size());
        per_n += cos * std::exp(-d * d / 72.0);
      }
      item_score += 10.0 * per_n / static_cast<double>(item.references.size());
    }
    total += item_score / 4.0;
  }
  return total / docs;
}

inline EvalCorpus random_corpus(std::mt19937_64& gen) {
  static const std::vector<std::string> lex{"a", "house", "road", "the", "new", "was", "built", "tree"};
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(gen); };
  auto sentence = [&](std::size_t min_len) {
    std::string s;
    const auto len = pick(min_len, 8);
    for (std::size_t i = 0; i < len; ++i) s += (i ? " " : "") + lex[pick(0, 4 + gen() % 4)];
    return s;
  };
  EvalCorpus c;
  const auto pairs = pick(2, 5);
  for (std::size_t p = 0; p < pairs; ++p) {
    EvalItem item{"p" + std::to_string(p), sentence(0), {}};
    const auto refs = pick(1, 5);
    for (std::size_t r = 0; r < refs; ++r) item.references.push_back(sentence(1));
    c.push_back(std::move(item));
  }
  return c;
}

}  // namespace satcap::oracle
