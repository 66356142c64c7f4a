#include "idc/metrics.hpp"

#include "idc/vocab.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace idc {

using json = nlohmann::json;

namespace {

constexpr int kMaxNgram = 4;

using Words = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, int>;

Words words_of(const std::string& text) { return split_words(text); }

NgramCounts count_ngrams(const Words& w, int n) {
  NgramCounts out;
  if (int(w.size()) < n) return out;
  for (size_t i = 0; i + size_t(n) <= w.size(); ++i) {
    ++out[Words(w.begin() + std::ptrdiff_t(i),
                w.begin() + std::ptrdiff_t(i) + n)];
  }
  return out;
}

void check_nonempty(const std::vector<EvalItem>& items, const char* op) {
  if (items.empty()) {
    throw std::invalid_argument(std::string(op) + ": no items");
  }
  for (const auto& it : items) {
    if (it.references.empty()) {
      throw std::invalid_argument(std::string(op) +
                                  ": item without references");
    }
  }
}

size_t lcs_length(const Words& a, const Words& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu4(const std::vector<EvalItem>& items) {
  check_nonempty(items, "bleu4");
  double clipped[kMaxNgram] = {0, 0, 0, 0};
  double total[kMaxNgram] = {0, 0, 0, 0};
  long hyp_len = 0, ref_len = 0;
  for (const auto& item : items) {
    const Words hyp = words_of(item.hypothesis);
    std::vector<Words> refs;
    for (const auto& r : item.references) refs.push_back(words_of(r));
    hyp_len += long(hyp.size());
    // Best-match reference length: closest, ties to the shorter.
    long best = long(refs[0].size());
    for (const auto& r : refs) {
      const long len = long(r.size());
      if (std::llabs(len - long(hyp.size())) <
              std::llabs(best - long(hyp.size())) ||
          (std::llabs(len - long(hyp.size())) ==
               std::llabs(best - long(hyp.size())) &&
           len < best)) {
        best = len;
      }
    }
    ref_len += best;
    for (int n = 1; n <= kMaxNgram; ++n) {
      const NgramCounts hc = count_ngrams(hyp, n);
      NgramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, c] : count_ngrams(r, n)) {
          max_ref[g] = std::max(max_ref[g], c);
        }
      }
      for (const auto& [g, c] : hc) {
        total[n - 1] += c;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) clipped[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_prec = 0.0;
  for (int n = 0; n < kMaxNgram; ++n) {
    if (clipped[n] == 0.0 || total[n] == 0.0) return 0.0;
    log_prec += std::log(clipped[n] / total[n]);
  }
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - double(ref_len) / double(hyp_len));
  return bp * std::exp(log_prec / kMaxNgram);
}

double rouge_l(const std::vector<EvalItem>& items, double beta) {
  check_nonempty(items, "rouge_l");
  double sum = 0.0;
  for (const auto& item : items) {
    const Words hyp = words_of(item.hypothesis);
    double best = 0.0;
    for (const auto& r : item.references) {
      const Words ref = words_of(r);
      if (hyp.empty() || ref.empty()) continue;
      const double lcs = double(lcs_length(hyp, ref));
      if (lcs == 0.0) continue;
      const double prec = lcs / double(hyp.size());
      const double rec = lcs / double(ref.size());
      const double f = (1.0 + beta * beta) * rec * prec /
                       (rec + beta * beta * prec);
      best = std::max(best, f);
    }
    sum += best;
  }
  return sum / double(items.size());
}

std::vector<double> cider_per_item(const std::vector<EvalItem>& items,
                                   CiderVariant variant, double sigma) {
  check_nonempty(items, "cider");
  // Document frequency: an n-gram counts once per item whose reference set
  // contains it.
  NgramCounts df[kMaxNgram];
  for (const auto& item : items) {
    std::set<std::vector<std::string>> seen;
    for (const auto& r : item.references) {
      const Words w = words_of(r);
      for (int n = 1; n <= kMaxNgram; ++n) {
        for (const auto& [g, c] : count_ngrams(w, n)) {
          if (seen.insert(g).second) ++df[n - 1][g];
        }
      }
    }
  }
  const double log_docs = std::log(double(items.size()));
  struct Vec {
    std::map<std::vector<std::string>, double> w[kMaxNgram];
    double norm[kMaxNgram] = {0, 0, 0, 0};
    long len = 0;
  };
  auto to_vec = [&](const Words& w) {
    Vec v;
    v.len = long(w.size());
    for (int n = 1; n <= kMaxNgram; ++n) {
      for (const auto& [g, c] : count_ngrams(w, n)) {
        auto it = df[n - 1].find(g);
        const double d = it == df[n - 1].end() ? 0.0 : double(it->second);
        const double idf = log_docs - std::log(std::max(1.0, d));
        const double weight = double(c) * idf;
        v.w[n - 1][g] = weight;
        v.norm[n - 1] += weight * weight;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };
  std::vector<double> scores;
  for (const auto& item : items) {
    const Vec hyp = to_vec(words_of(item.hypothesis));
    double item_score = 0.0;
    for (const auto& r : item.references) {
      const Vec ref = to_vec(words_of(r));
      double per_n_sum = 0.0;
      for (int n = 0; n < kMaxNgram; ++n) {
        double dot = 0.0;
        for (const auto& [g, wv] : hyp.w[n]) {
          auto it = ref.w[n].find(g);
          if (it == ref.w[n].end()) continue;
          const double h = variant == CiderVariant::kD
                               ? std::min(wv, it->second)
                               : wv;
          dot += h * it->second;
        }
        double val = 0.0;
        if (hyp.norm[n] > 0.0 && ref.norm[n] > 0.0) {
          val = dot / (hyp.norm[n] * ref.norm[n]);
        }
        if (variant == CiderVariant::kD) {
          const double delta = double(hyp.len - ref.len);
          val *= std::exp(-delta * delta / (2.0 * sigma * sigma));
        }
        per_n_sum += val;
      }
      item_score += per_n_sum / kMaxNgram;
    }
    scores.push_back(10.0 * item_score / double(item.references.size()));
  }
  return scores;
}

double cider(const std::vector<EvalItem>& items, CiderVariant variant,
             double sigma) {
  const auto scores = cider_per_item(items, variant, sigma);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / double(scores.size());
}

MetricsReport evaluate_all(const std::vector<EvalItem>& items) {
  MetricsReport r;
  r.n = int(items.size());
  r.bleu4 = bleu4(items);
  r.rouge_l = rouge_l(items);
  const auto plain = cider_per_item(items, CiderVariant::kPlain);
  const auto d = cider_per_item(items, CiderVariant::kD);
  double sp = 0.0, sd = 0.0;
  for (size_t i = 0; i < items.size(); ++i) {
    sp += plain[i];
    sd += d[i];
  }
  r.cider = sp / double(items.size());
  r.cider_d = sd / double(items.size());
  // Breakdown: group means of the per-item CIDEr computed with full-corpus
  // document frequencies.
  std::map<std::string, std::pair<double, int>> groups;
  for (size_t i = 0; i < items.size(); ++i) {
    if (!items[i].change_type) continue;
    auto& g = groups[*items[i].change_type];
    g.first += plain[i];
    g.second += 1;
  }
  for (const auto& [type, g] : groups) {
    r.breakdown_cider[type] = g.first / double(g.second);
    r.breakdown_n[type] = g.second;
  }
  return r;
}

std::string report_table(const MetricsReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  out << "items        " << r.n << "\n";
  out << "BLEU-4       " << r.bleu4 << "\n";
  out << "ROUGE-L      " << r.rouge_l << "\n";
  out << "CIDEr        " << r.cider << "\n";
  out << "CIDEr-D      " << r.cider_d << "\n";
  if (!r.breakdown_cider.empty()) {
    out << "CIDEr by change type:\n";
    for (const auto& [type, score] : r.breakdown_cider) {
      out << "  " << type << " (n=" << r.breakdown_n.at(type) << ")  "
          << score << "\n";
    }
  }
  return out.str();
}

std::string report_json(const MetricsReport& r) {
  json j;
  j["n"] = r.n;
  j["bleu4"] = r.bleu4;
  j["rouge_l"] = r.rouge_l;
  j["cider"] = r.cider;
  j["cider_d"] = r.cider_d;
  json breakdown = json::object();
  for (const auto& [type, score] : r.breakdown_cider) {
    breakdown[type] = {{"cider", score}, {"n", r.breakdown_n.at(type)}};
  }
  j["breakdown"] = std::move(breakdown);
  return j.dump(2);
}

void write_generation_jsonl(const std::string& path,
                            const std::vector<EvalItem>& items) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& item : items) {
    json j;
    j["id"] = item.id;
    j["hypothesis"] = item.hypothesis;
    j["references"] = item.references;
    if (item.change_type) j["change_type"] = *item.change_type;
    out << j.dump() << "\n";
  }
}

std::vector<EvalItem> load_generation_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<EvalItem> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    EvalItem item;
    if (!j.contains("hypothesis") || !j.contains("references")) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": needs hypothesis and references");
    }
    item.id = j.value("id", std::to_string(line_no));
    item.hypothesis = j["hypothesis"].get<std::string>();
    for (const auto& r : j["references"]) {
      item.references.push_back(r.get<std::string>());
    }
    if (j.contains("change_type") && !j["change_type"].is_null()) {
      item.change_type = j["change_type"].get<std::string>();
    }
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace idc
