#pragma once

#include "idc/corpus.hpp"

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace idc {

// TF-IDF index over a caption corpus. Weights are tf * ln(N/df); cosine
// similarity is taken between the sparse weight vectors.
struct TfidfIndex {
  int n_docs = 0;
  std::map<std::string, int> df;
  std::vector<std::map<std::string, double>> weights;  // per caption
  std::vector<double> norms;
  std::vector<std::string> texts;  // normalized, corpus order
  bool degenerate = false;         // all idf zero (single-document corpus)
};

TfidfIndex build_tfidf_index(const std::vector<std::string>& captions);

std::map<std::string, double> tfidf_vector(const TfidfIndex& idx,
                                           const std::string& text);
double tfidf_cosine(const std::map<std::string, double>& a,
                    const std::map<std::string, double>& b);
// Similarity between two indexed captions.
double tfidf_similarity(const TfidfIndex& idx, int i, int j);

// Indices of the top-k most similar indexed captions, ties broken by corpus
// order. The query's own entry (self_index and any string-equal caption) is
// excluded. Throws when fewer than k candidates exist.
std::vector<int> retrieve_negatives(const std::string& query,
                                    const TfidfIndex& idx, int k,
                                    std::optional<int> self_index = {});

// Per-tag word pools harvested from the annotated (NN/NNS/JJ/JJR) words:
// top 50% by TF-IDF weight within each sentence, then document-frequency
// filtered.
struct PosVocabularies {
  std::map<Tag, std::vector<std::string>> words;
  const std::vector<std::string>& of(Tag t) const;
};

PosVocabularies build_pos_vocabularies(const std::vector<Caption>& corpus,
                                       int df_min);

// Word -> tag lookup compiled from a closed lexicon; unknown words tag as
// OTHER.
class LexiconTagger {
 public:
  explicit LexiconTagger(
      const std::vector<std::pair<std::string, Tag>>& entries);
  std::vector<Tag> tag(const std::vector<std::string>& words) const;

 private:
  std::map<std::string, Tag> lex_;
};

// Identifies entity-mention spans by scanning for lexicon words (one span
// per occurrence).
std::vector<Span> detect_entity_spans(const std::vector<std::string>& words,
                                      const std::vector<std::string>& lexicon);

// Replaces the top-50% most important annotated words with same-tag draws
// from the vocabularies. Preserves length and the tag sequence. Throws when
// the caption has no annotated word or nothing could be replaced.
Caption replace_negative(const Caption& caption, const PosVocabularies& vocabs,
                         const TfidfIndex& idx, std::mt19937_64& rng);

// Swaps the caption's first two entity mentions; an involution. Throws when
// fewer than two mentions exist.
Caption confuse_negative(const Caption& caption);

// Replaces the caption's first entity mention with the donor's (the
// cross-sentence form of the confusion strategy). Throws when either side
// lacks a mention or the mentions are identical.
Caption confuse_with_subject(const Caption& caption, const Caption& donor);

struct NegativeRecord {
  Caption caption;
  std::string strategy;  // retrieve | replace | confuse
};

struct NegativeSet {
  std::vector<NegativeRecord> items;
};

struct NegativeRatio {
  int retrieve = 2;
  int replace = 2;
  int confuse = 2;
  int total() const { return retrieve + replace + confuse; }
};

// Assembles the per-triplet negative set. Confuse can be disabled (pseudo
// triplets), in which case its quota rebalances onto retrieve and replace.
// Per-strategy shortfalls backfill from retrieve, and retrieval shortfalls
// backfill from replace. All negatives differ from the positive and from
// each other as token sequences.
NegativeSet build_negative_set(const Caption& positive,
                               std::optional<int> corpus_index,
                               const std::vector<Caption>& corpus,
                               const TfidfIndex& idx,
                               const PosVocabularies& vocabs,
                               NegativeRatio ratio, bool allow_confuse,
                               std::mt19937_64& rng);

void write_negatives_jsonl(const std::string& path,
                           const std::vector<NegativeSet>& sets);
std::vector<NegativeSet> load_negatives_jsonl(const std::string& path);
void write_pos_vocabularies_json(const std::string& path,
                                 const PosVocabularies& vocabs);

}  // namespace idc
