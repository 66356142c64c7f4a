#include "idc/negatives.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace idc {

using json = nlohmann::json;

namespace {

bool is_annotated(Tag t) {
  return t == Tag::kNN || t == Tag::kNNS || t == Tag::kJJ || t == Tag::kJJR;
}

std::vector<std::string> caption_words(const Caption& c) {
  return split_words(c.text);
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

// Annotated positions ranked by TF-IDF weight (desc), ties left-to-right;
// returns the top half, rounded up, in sentence order.
std::vector<size_t> important_positions(const std::vector<std::string>& words,
                                        const std::vector<Tag>& tags,
                                        const TfidfIndex& idx,
                                        const std::string& text) {
  std::vector<size_t> annotated;
  for (size_t i = 0; i < words.size(); ++i) {
    if (is_annotated(tags[i])) annotated.push_back(i);
  }
  if (annotated.empty()) return {};
  const auto vec = tfidf_vector(idx, text);
  std::stable_sort(annotated.begin(), annotated.end(),
                   [&](size_t a, size_t b) {
                     const double wa = vec.count(words[a]) ? vec.at(words[a]) : 0.0;
                     const double wb = vec.count(words[b]) ? vec.at(words[b]) : 0.0;
                     if (wa != wb) return wa > wb;
                     return a < b;
                   });
  const size_t keep = (annotated.size() + 1) / 2;
  std::vector<size_t> top(annotated.begin(),
                          annotated.begin() + std::ptrdiff_t(keep));
  std::sort(top.begin(), top.end());
  return top;
}

}  // namespace

TfidfIndex build_tfidf_index(const std::vector<std::string>& captions) {
  TfidfIndex idx;
  idx.n_docs = int(captions.size());
  for (const auto& raw : captions) {
    idx.texts.push_back(normalize_text(raw));
  }
  for (const auto& text : idx.texts) {
    std::set<std::string> seen;
    for (const auto& w : split_words(text)) {
      if (seen.insert(w).second) ++idx.df[w];
    }
  }
  for (const auto& text : idx.texts) {
    idx.weights.push_back(tfidf_vector(idx, text));
    double sq = 0.0;
    for (const auto& [w, v] : idx.weights.back()) sq += v * v;
    idx.norms.push_back(std::sqrt(sq));
  }
  idx.degenerate = idx.n_docs <= 1;
  return idx;
}

std::map<std::string, double> tfidf_vector(const TfidfIndex& idx,
                                           const std::string& text) {
  std::map<std::string, int> tf;
  for (const auto& w : split_words(normalize_text(text))) ++tf[w];
  std::map<std::string, double> out;
  for (const auto& [w, count] : tf) {
    auto it = idx.df.find(w);
    if (it == idx.df.end()) continue;  // unseen terms carry no weight
    out[w] = double(count) * std::log(double(idx.n_docs) / double(it->second));
  }
  return out;
}

double tfidf_cosine(const std::map<std::string, double>& a,
                    const std::map<std::string, double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [w, v] : a) {
    na += v * v;
    auto it = b.find(w);
    if (it != b.end()) dot += v * it->second;
  }
  for (const auto& [w, v] : b) nb += v * v;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double tfidf_similarity(const TfidfIndex& idx, int i, int j) {
  if (i < 0 || j < 0 || i >= idx.n_docs || j >= idx.n_docs) {
    throw std::out_of_range("tfidf_similarity: index");
  }
  const double nn = idx.norms[size_t(i)] * idx.norms[size_t(j)];
  if (nn == 0.0) return 0.0;
  double dot = 0.0;
  for (const auto& [w, v] : idx.weights[size_t(i)]) {
    auto it = idx.weights[size_t(j)].find(w);
    if (it != idx.weights[size_t(j)].end()) dot += v * it->second;
  }
  return dot / nn;
}

std::vector<int> retrieve_negatives(const std::string& query,
                                    const TfidfIndex& idx, int k,
                                    std::optional<int> self_index) {
  const std::string qtext = normalize_text(query);
  const auto qvec = tfidf_vector(idx, qtext);
  std::vector<std::pair<double, int>> scored;
  for (int i = 0; i < idx.n_docs; ++i) {
    if (self_index && *self_index == i) continue;
    if (idx.texts[size_t(i)] == qtext) continue;
    scored.emplace_back(tfidf_cosine(qvec, idx.weights[size_t(i)]), i);
  }
  if (int(scored.size()) < k) {
    throw std::invalid_argument(
        "retrieve_negatives: k exceeds available candidates");
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) {
                     if (a.first != b.first) return a.first > b.first;
                     return a.second < b.second;
                   });
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(scored[size_t(i)].second);
  return out;
}

const std::vector<std::string>& PosVocabularies::of(Tag t) const {
  static const std::vector<std::string> kEmpty;
  auto it = words.find(t);
  return it == words.end() ? kEmpty : it->second;
}

PosVocabularies build_pos_vocabularies(const std::vector<Caption>& corpus,
                                       int df_min) {
  std::vector<std::string> texts;
  for (const auto& c : corpus) texts.push_back(c.text);
  const TfidfIndex idx = build_tfidf_index(texts);
  std::map<Tag, std::set<std::string>> pools;
  for (const auto& c : corpus) {
    const auto words = caption_words(c);
    if (words.size() != c.pos_tags.size()) {
      throw std::invalid_argument("pos vocabularies: caption tags mismatch");
    }
    for (size_t pos : important_positions(words, c.pos_tags, idx, c.text)) {
      pools[c.pos_tags[pos]].insert(words[pos]);
    }
  }
  PosVocabularies out;
  for (const auto& [tag, pool] : pools) {
    std::vector<std::string> kept;
    for (const auto& w : pool) {
      auto it = idx.df.find(w);
      if (it != idx.df.end() && it->second >= df_min) kept.push_back(w);
    }
    if (!kept.empty()) out.words[tag] = std::move(kept);
  }
  return out;
}

LexiconTagger::LexiconTagger(
    const std::vector<std::pair<std::string, Tag>>& entries) {
  for (const auto& [w, t] : entries) lex_[w] = t;
}

std::vector<Tag> LexiconTagger::tag(
    const std::vector<std::string>& words) const {
  std::vector<Tag> out;
  for (const auto& w : words) {
    auto it = lex_.find(w);
    out.push_back(it == lex_.end() ? Tag::kOther : it->second);
  }
  return out;
}

std::vector<Span> detect_entity_spans(
    const std::vector<std::string>& words,
    const std::vector<std::string>& lexicon) {
  std::set<std::string> lex(lexicon.begin(), lexicon.end());
  std::vector<Span> out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (lex.count(words[i])) out.push_back({int(i), 1});
  }
  return out;
}

Caption replace_negative(const Caption& caption,
                         const PosVocabularies& vocabs, const TfidfIndex& idx,
                         std::mt19937_64& rng) {
  auto words = caption_words(caption);
  if (words.size() != caption.pos_tags.size()) {
    throw std::invalid_argument("replace_negative: tags mismatch");
  }
  const auto targets =
      important_positions(words, caption.pos_tags, idx, caption.text);
  if (targets.empty()) {
    throw std::runtime_error("replace_negative: caption has no annotated word");
  }
  bool changed = false;
  for (size_t pos : targets) {
    const auto& pool = vocabs.of(caption.pos_tags[pos]);
    std::vector<const std::string*> candidates;
    for (const auto& w : pool) {
      if (w != words[pos]) candidates.push_back(&w);
    }
    if (candidates.empty()) continue;
    std::uniform_int_distribution<size_t> pick(0, candidates.size() - 1);
    words[pos] = *candidates[pick(rng)];
    changed = true;
  }
  if (!changed) {
    throw std::runtime_error(
        "replace_negative: vocabularies offer no alternative word");
  }
  Caption out;
  out.text = join_words(words);
  out.pos_tags = caption.pos_tags;
  out.subject_spans = caption.subject_spans;
  return out;
}

namespace {

Caption splice_span(const Caption& caption, const Span& at,
                    const std::vector<std::string>& repl_words,
                    const std::vector<Tag>& repl_tags) {
  auto words = caption_words(caption);
  std::vector<std::string> out_words(words.begin(),
                                     words.begin() + at.start);
  out_words.insert(out_words.end(), repl_words.begin(), repl_words.end());
  out_words.insert(out_words.end(), words.begin() + at.start + at.len,
                   words.end());
  std::vector<Tag> out_tags(caption.pos_tags.begin(),
                            caption.pos_tags.begin() + at.start);
  out_tags.insert(out_tags.end(), repl_tags.begin(), repl_tags.end());
  out_tags.insert(out_tags.end(),
                  caption.pos_tags.begin() + at.start + at.len,
                  caption.pos_tags.end());
  const int delta = int(repl_words.size()) - at.len;
  Caption out;
  out.text = join_words(out_words);
  out.pos_tags = std::move(out_tags);
  for (const Span& s : caption.subject_spans) {
    if (s.start == at.start && s.len == at.len) {
      out.subject_spans.push_back({s.start, int(repl_words.size())});
    } else if (s.start >= at.start + at.len) {
      out.subject_spans.push_back({s.start + delta, s.len});
    } else {
      out.subject_spans.push_back(s);
    }
  }
  return out;
}

}  // namespace

Caption confuse_negative(const Caption& caption) {
  if (caption.subject_spans.size() < 2) {
    throw std::runtime_error(
        "confuse_negative: caption needs two entity mentions");
  }
  std::vector<Span> spans = caption.subject_spans;
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.start < b.start; });
  const Span a = spans[0], b = spans[1];
  if (a.start + a.len > b.start) {
    throw std::runtime_error("confuse_negative: overlapping entity mentions");
  }
  const auto words = caption_words(caption);
  if (size_t(b.start + b.len) > words.size()) {
    throw std::runtime_error("confuse_negative: span out of range");
  }
  std::vector<std::string> wa(words.begin() + a.start,
                              words.begin() + a.start + a.len);
  std::vector<std::string> wb(words.begin() + b.start,
                              words.begin() + b.start + b.len);
  std::vector<Tag> ta(caption.pos_tags.begin() + a.start,
                      caption.pos_tags.begin() + a.start + a.len);
  std::vector<Tag> tb(caption.pos_tags.begin() + b.start,
                      caption.pos_tags.begin() + b.start + b.len);
  // Replace the later mention first so the earlier indices stay valid.
  Caption step = splice_span(caption, b, wa, ta);
  return splice_span(step, a, wb, tb);
}

Caption confuse_with_subject(const Caption& caption, const Caption& donor) {
  if (caption.subject_spans.empty() || donor.subject_spans.empty()) {
    throw std::runtime_error("confuse_with_subject: missing entity mention");
  }
  auto sorted = [](std::vector<Span> spans) {
    std::sort(spans.begin(), spans.end(),
              [](const Span& a, const Span& b) { return a.start < b.start; });
    return spans;
  };
  const auto own_spans = sorted(caption.subject_spans);
  const auto donor_spans = sorted(donor.subject_spans);
  const auto donor_words = caption_words(donor);
  const auto own_words = caption_words(caption);
  // First mention pair whose word sequences differ; subjects come before
  // objects in both orderings.
  for (const Span& at : own_spans) {
    std::vector<std::string> own(own_words.begin() + at.start,
                                 own_words.begin() + at.start + at.len);
    for (const Span& from : donor_spans) {
      std::vector<std::string> repl(
          donor_words.begin() + from.start,
          donor_words.begin() + from.start + from.len);
      if (repl == own) continue;
      std::vector<Tag> repl_tags(
          donor.pos_tags.begin() + from.start,
          donor.pos_tags.begin() + from.start + from.len);
      return splice_span(caption, at, repl, repl_tags);
    }
  }
  throw std::runtime_error("confuse_with_subject: identical subjects");
}

NegativeSet build_negative_set(const Caption& positive,
                               std::optional<int> corpus_index,
                               const std::vector<Caption>& corpus,
                               const TfidfIndex& idx,
                               const PosVocabularies& vocabs,
                               NegativeRatio ratio, bool allow_confuse,
                               std::mt19937_64& rng) {
  int want_retrieve = ratio.retrieve;
  int want_replace = ratio.replace;
  int want_confuse = ratio.confuse;
  if (!allow_confuse) {
    want_retrieve += (want_confuse + 1) / 2;
    want_replace += want_confuse / 2;
    want_confuse = 0;
  }
  const int total = want_retrieve + want_replace + want_confuse;

  const std::string pos_text = normalize_text(positive.text);
  std::set<std::string> used = {pos_text};
  NegativeSet out;
  auto try_add = [&](Caption c, const char* strategy) {
    c.text = normalize_text(c.text);
    if (used.count(c.text)) return false;
    used.insert(c.text);
    out.items.push_back({std::move(c), strategy});
    return true;
  };

  // Ranked retrieval candidates, reused for backfill.
  std::vector<int> ranked;
  {
    const auto qvec = tfidf_vector(idx, pos_text);
    std::vector<std::pair<double, int>> scored;
    for (int i = 0; i < idx.n_docs; ++i) {
      if (corpus_index && *corpus_index == i) continue;
      if (idx.texts[size_t(i)] == pos_text) continue;
      scored.emplace_back(tfidf_cosine(qvec, idx.weights[size_t(i)]), i);
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) {
                       if (a.first != b.first) return a.first > b.first;
                       return a.second < b.second;
                     });
    for (const auto& [sim, i] : scored) ranked.push_back(i);
  }
  size_t ranked_next = 0;
  auto add_retrieved = [&]() {
    while (ranked_next < ranked.size()) {
      const int i = ranked[ranked_next++];
      if (try_add(corpus[size_t(i)], "retrieve")) return true;
    }
    return false;
  };
  auto add_replaced = [&]() {
    for (int attempt = 0; attempt < 30; ++attempt) {
      try {
        if (try_add(replace_negative(positive, vocabs, idx, rng), "replace")) {
          return true;
        }
      } catch (const std::runtime_error&) {
        return false;  // caption not replaceable at all
      }
    }
    return false;
  };

  for (int i = 0; i < want_retrieve; ++i) add_retrieved();
  for (int i = 0; i < want_replace; ++i) add_replaced();

  if (want_confuse > 0) {
    int added = 0;
    try {
      if (try_add(confuse_negative(positive), "confuse")) ++added;
    } catch (const std::runtime_error&) {
    }
    // Remaining slots use cross-sentence subject substitution.
    for (int attempt = 0; attempt < 60 && added < want_confuse; ++attempt) {
      if (corpus.empty()) break;
      std::uniform_int_distribution<size_t> pick(0, corpus.size() - 1);
      const Caption& donor = corpus[pick(rng)];
      if (donor.subject_spans.empty()) continue;
      try {
        if (try_add(confuse_with_subject(positive, donor), "confuse")) {
          ++added;
        }
      } catch (const std::runtime_error&) {
      }
    }
  }

  // Backfill: retrieve first, then replace.
  while (int(out.items.size()) < total && add_retrieved()) {
  }
  while (int(out.items.size()) < total && add_replaced()) {
  }
  if (out.items.empty()) {
    throw std::runtime_error(
        "build_negative_set: could not construct any negative");
  }
  return out;
}

void write_negatives_jsonl(const std::string& path,
                           const std::vector<NegativeSet>& sets) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (size_t i = 0; i < sets.size(); ++i) {
    json j;
    j["caption_id"] = i;
    json negs = json::array();
    for (const auto& item : sets[i].items) {
      json n;
      n["strategy"] = item.strategy;
      n["text"] = item.caption.text;
      negs.push_back(std::move(n));
    }
    j["negatives"] = std::move(negs);
    out << j.dump() << "\n";
  }
}

std::vector<NegativeSet> load_negatives_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<NegativeSet> out;
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
    if (!j.contains("caption_id") || !j.contains("negatives")) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": missing caption_id or negatives");
    }
    if (j["caption_id"].get<size_t>() != out.size()) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": caption_id out of order");
    }
    NegativeSet set;
    for (const auto& n : j["negatives"]) {
      NegativeRecord rec;
      rec.strategy = n.at("strategy").get<std::string>();
      rec.caption.text = normalize_text(n.at("text").get<std::string>());
      rec.caption.pos_tags.assign(split_words(rec.caption.text).size(),
                                  Tag::kOther);
      set.items.push_back(std::move(rec));
    }
    out.push_back(std::move(set));
  }
  return out;
}

void write_pos_vocabularies_json(const std::string& path,
                                 const PosVocabularies& vocabs) {
  json j;
  for (const auto& [tag, words] : vocabs.words) {
    j[tag_name(tag)] = words;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace idc
