#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace idc {

struct EvalItem {
  std::string id;
  std::string hypothesis;
  std::vector<std::string> references;
  std::optional<std::string> change_type;
};

// Corpus-level BLEU-4: clipped n-gram precisions (n=1..4), geometric mean,
// brevity penalty, no smoothing (any zero precision gives zero).
double bleu4(const std::vector<EvalItem>& items);

// Mean over items of the max-over-references LCS F-measure (beta = 1.2).
double rouge_l(const std::vector<EvalItem>& items, double beta = 1.2);

enum class CiderVariant { kPlain, kD };

// TF-IDF-weighted n-gram cosine (n = 1..4, averaged, x10); the D variant
// clips hypothesis counts to the reference's and applies the Gaussian
// length penalty (sigma = 6). Document frequencies come from the items'
// reference sets.
std::vector<double> cider_per_item(const std::vector<EvalItem>& items,
                                   CiderVariant variant, double sigma = 6.0);
double cider(const std::vector<EvalItem>& items, CiderVariant variant,
             double sigma = 6.0);

struct MetricsReport {
  int n = 0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double cider_d = 0.0;
  // Per-change-type CIDEr over the item groups (document frequencies from
  // the full corpus); absent types are simply not listed.
  std::map<std::string, double> breakdown_cider;
  std::map<std::string, int> breakdown_n;
};

MetricsReport evaluate_all(const std::vector<EvalItem>& items);
std::string report_table(const MetricsReport& r);
std::string report_json(const MetricsReport& r);

void write_generation_jsonl(const std::string& path,
                            const std::vector<EvalItem>& items);
std::vector<EvalItem> load_generation_jsonl(const std::string& path);

}  // namespace idc
