#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "idc/negatives.hpp"

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

using namespace idc;

namespace {

// Brute-force tf-idf cosine over dense vocabulary vectors, independent of
// the index implementation.
double brute_cosine(const std::vector<std::string>& corpus, int i, int j) {
  std::set<std::string> vocab;
  std::vector<std::map<std::string, int>> tf(corpus.size());
  std::map<std::string, int> df;
  for (size_t d = 0; d < corpus.size(); ++d) {
    std::set<std::string> seen;
    for (const auto& w : split_words(corpus[d])) {
      ++tf[d][w];
      vocab.insert(w);
      if (seen.insert(w).second) ++df[w];
    }
  }
  double dot = 0, ni = 0, nj = 0;
  for (const auto& w : vocab) {
    const double idf = std::log(double(corpus.size()) / double(df[w]));
    const double wi = (tf[size_t(i)].count(w) ? tf[size_t(i)][w] : 0) * idf;
    const double wj = (tf[size_t(j)].count(w) ? tf[size_t(j)][w] : 0) * idf;
    dot += wi * wj;
    ni += wi * wi;
    nj += wj * wj;
  }
  if (ni == 0 || nj == 0) return 0.0;
  return dot / (std::sqrt(ni) * std::sqrt(nj));
}

Caption make_caption(const std::string& text, const std::vector<Tag>& tags,
                     const std::vector<Span>& spans = {}) {
  Caption c;
  c.text = normalize_text(text);
  c.pos_tags = tags;
  c.subject_spans = spans;
  return c;
}

// Small two-entity corpus in the style of bird-difference descriptions.
std::vector<Caption> bird_corpus() {
  std::vector<Caption> out;
  const std::vector<std::string> parts = {"tail", "beak", "wings", "crest"};
  const std::vector<std::string> adjs = {"longer", "shorter", "darker",
                                         "brighter"};
  for (const auto& part : parts) {
    for (const auto& adj : adjs) {
      // animal1 has a <adj> <part> than animal2
      Caption c = make_caption(
          "animal1 has a " + adj + " " + part + " than animal2",
          {Tag::kNN, Tag::kVB, Tag::kOther, Tag::kJJR,
           part == "wings" ? Tag::kNNS : Tag::kNN, Tag::kOther, Tag::kNN},
          {{0, 1}, {6, 1}});
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tfidf degenerate single-document corpus") {
  const TfidfIndex idx = build_tfidf_index({"a lonely caption"});
  CHECK(idx.degenerate);
  for (const auto& [w, v] : idx.weights[0]) CHECK(v == 0.0);
}

TEST_CASE("duplicate captions have similarity one") {
  const TfidfIndex idx =
      build_tfidf_index({"the red ball moved", "the red ball moved",
                         "a blue cube appeared"});
  CHECK(tfidf_similarity(idx, 0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("toy-corpus similarities match the brute-force oracle") {
  const std::vector<std::string> corpus = {
      "the red ball moved to the left",
      "the red cube is missing",
      "a blue ball appeared near the cube"};
  const TfidfIndex idx = build_tfidf_index(corpus);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(tfidf_similarity(idx, i, j) ==
            doctest::Approx(brute_cosine(corpus, i, j)).epsilon(1e-9));
    }
  }
}

TEST_CASE("retrieve excludes self and string-equal entries") {
  const std::vector<std::string> corpus = {
      "the red ball moved", "the red ball moved", "the red cube moved",
      "a green cone appeared"};
  const TfidfIndex idx = build_tfidf_index(corpus);
  const auto top = retrieve_negatives(corpus[0], idx, 1, 0);
  CHECK(top.size() == 1);
  CHECK(top[0] == 2);  // the duplicate at index 1 is skipped
  CHECK_THROWS(retrieve_negatives(corpus[0], idx, 3, 0));
}

TEST_CASE("retrieve top-1 matches brute force over a 50-caption corpus") {
  std::vector<Caption> corpus = bird_corpus();
  std::vector<std::string> texts;
  for (const auto& c : corpus) texts.push_back(c.text);
  const TfidfIndex idx = build_tfidf_index(texts);
  for (int q = 0; q < int(texts.size()); ++q) {
    const auto got = retrieve_negatives(texts[size_t(q)], idx, 1, q);
    int best = -1;
    double best_sim = -1.0;
    for (int i = 0; i < int(texts.size()); ++i) {
      if (i == q || texts[size_t(i)] == texts[size_t(q)]) continue;
      const double sim = brute_cosine(texts, q, i);
      if (sim > best_sim + 1e-12) {
        best_sim = sim;
        best = i;
      }
    }
    CHECK(got[0] == best);
  }
}

TEST_CASE("pos vocabularies keep the important half and apply df filter") {
  // Four annotated words; the two rarest (highest tf-idf) must survive.
  std::vector<Caption> corpus;
  corpus.push_back(make_caption(
      "the red ball has a shiny metal crown",
      {Tag::kOther, Tag::kJJ, Tag::kNN, Tag::kVB, Tag::kOther, Tag::kJJ,
       Tag::kNN, Tag::kNN}));
  for (int i = 0; i < 9; ++i) {
    corpus.push_back(make_caption(
        "the red ball has a dull look",
        {Tag::kOther, Tag::kJJ, Tag::kNN, Tag::kVB, Tag::kOther, Tag::kJJ,
         Tag::kNN}));
  }
  const PosVocabularies v1 = build_pos_vocabularies(corpus, 1);
  // "red" and "ball" (df 10) lose to the rare annotated words in caption 0:
  // 4 annotated -> top 2 selected.
  const auto& jj = v1.of(Tag::kJJ);
  const auto& nn_words = v1.of(Tag::kNN);
  CHECK(std::count(jj.begin(), jj.end(), "shiny") == 1);
  CHECK((std::count(nn_words.begin(), nn_words.end(), "crown") +
         std::count(nn_words.begin(), nn_words.end(), "metal")) >= 1);
  CHECK(std::count(jj.begin(), jj.end(), "red") == 0);

  // df threshold: words below df_min disappear.
  const PosVocabularies v2 = build_pos_vocabularies(corpus, 2);
  CHECK(v2.of(Tag::kNN) == std::vector<std::string>{"look"});  // df 9
  CHECK(std::count(v2.of(Tag::kJJ).begin(), v2.of(Tag::kJJ).end(),
                   "shiny") == 0);  // df 1 < 2
}

TEST_CASE("replace: single-alternative vocabulary forces the swap") {
  const Caption cap = make_caption("the gray ball",
                                   {Tag::kOther, Tag::kJJ, Tag::kNN});
  PosVocabularies vocabs;
  vocabs.words[Tag::kJJ] = {"gray", "red"};
  vocabs.words[Tag::kNN] = {"ball"};
  const TfidfIndex idx = build_tfidf_index({"the gray ball", "a red cube"});
  std::mt19937_64 rng(3);
  const Caption out = replace_negative(cap, vocabs, idx, rng);
  CHECK(out.text == "the red ball");
  CHECK(out.pos_tags == cap.pos_tags);
  CHECK(split_words(out.text).size() == 3);
}

TEST_CASE("replace preserves length and tags across a corpus") {
  const auto corpus = bird_corpus();
  std::vector<std::string> texts;
  for (const auto& c : corpus) texts.push_back(c.text);
  const TfidfIndex idx = build_tfidf_index(texts);
  const PosVocabularies vocabs = build_pos_vocabularies(corpus, 1);
  std::mt19937_64 rng(5);
  long annotated = 0, replaced = 0;
  for (const auto& cap : corpus) {
    const Caption out = replace_negative(cap, vocabs, idx, rng);
    CHECK(out.pos_tags == cap.pos_tags);
    const auto before = split_words(cap.text);
    const auto after = split_words(out.text);
    REQUIRE(before.size() == after.size());
    CHECK(out.text != cap.text);
    for (size_t i = 0; i < before.size(); ++i) {
      const Tag t = cap.pos_tags[i];
      const bool is_annotated = t == Tag::kNN || t == Tag::kNNS ||
                                t == Tag::kJJ || t == Tag::kJJR;
      if (is_annotated) ++annotated;
      if (before[i] != after[i]) {
        ++replaced;
        CHECK(is_annotated);
      }
    }
  }
  // Top 50% (round up) of annotated words are candidates.
  CHECK(double(replaced) / double(annotated) ==
        doctest::Approx(0.5).epsilon(0.2));
  // No annotated words -> error.
  const Caption bare =
      make_caption("it was so", {Tag::kOther, Tag::kOther, Tag::kOther});
  CHECK_THROWS(replace_negative(bare, vocabs, idx, rng));
}

TEST_CASE("confuse swaps the two mentions and is an involution") {
  const Caption cap = make_caption(
      "animal1 has a longer tail than animal2",
      {Tag::kNN, Tag::kVB, Tag::kOther, Tag::kJJR, Tag::kNN, Tag::kOther,
       Tag::kNN},
      {{0, 1}, {6, 1}});
  const Caption swapped = confuse_negative(cap);
  CHECK(swapped.text == "animal2 has a longer tail than animal1");
  const Caption back = confuse_negative(swapped);
  CHECK(back.text == cap.text);
  CHECK(back.pos_tags == cap.pos_tags);
  CHECK(back.subject_spans == cap.subject_spans);

  // Multi-word mentions with different lengths still restore exactly.
  const Caption wide = make_caption(
      "the small red bird sits above the crow",
      {Tag::kOther, Tag::kJJ, Tag::kJJ, Tag::kNN, Tag::kVB, Tag::kOther,
       Tag::kOther, Tag::kNN},
      {{1, 3}, {7, 1}});
  const Caption wswap = confuse_negative(wide);
  CHECK(wswap.text == "the crow sits above the small red bird");
  CHECK(confuse_negative(wswap).text == wide.text);

  const Caption one = make_caption("the ball moved",
                                   {Tag::kOther, Tag::kNN, Tag::kVB},
                                   {{1, 1}});
  CHECK_THROWS(confuse_negative(one));
}

TEST_CASE("confuse preserves the token multiset") {
  const auto corpus = bird_corpus();
  for (const auto& cap : corpus) {
    const Caption swapped = confuse_negative(cap);
    auto a = split_words(cap.text);
    auto b = split_words(swapped.text);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("build_negative_set fills 2:2:2 and deduplicates") {
  const auto corpus = bird_corpus();
  std::vector<std::string> texts;
  for (const auto& c : corpus) texts.push_back(c.text);
  const TfidfIndex idx = build_tfidf_index(texts);
  const PosVocabularies vocabs = build_pos_vocabularies(corpus, 1);
  std::mt19937_64 rng(7);
  for (int q = 0; q < 8; ++q) {
    const NegativeSet set = build_negative_set(
        corpus[size_t(q)], q, corpus, idx, vocabs, {2, 2, 2}, true, rng);
    CHECK(set.items.size() == 6);
    std::map<std::string, int> by_strategy;
    std::set<std::string> texts_seen;
    for (const auto& item : set.items) {
      ++by_strategy[item.strategy];
      CHECK(item.caption.text != corpus[size_t(q)].text);
      CHECK(texts_seen.insert(item.caption.text).second);
    }
    CHECK(by_strategy["retrieve"] == 2);
    CHECK(by_strategy["replace"] == 2);
    CHECK(by_strategy["confuse"] == 2);
  }
}

TEST_CASE("pseudo triplets disable confuse and rebalance to 3:3") {
  const auto corpus = bird_corpus();
  std::vector<std::string> texts;
  for (const auto& c : corpus) texts.push_back(c.text);
  const TfidfIndex idx = build_tfidf_index(texts);
  const PosVocabularies vocabs = build_pos_vocabularies(corpus, 1);
  std::mt19937_64 rng(9);
  const NegativeSet set = build_negative_set(corpus[0], 0, corpus, idx,
                                             vocabs, {2, 2, 2}, false, rng);
  CHECK(set.items.size() == 6);
  std::map<std::string, int> by_strategy;
  for (const auto& item : set.items) ++by_strategy[item.strategy];
  CHECK(by_strategy["confuse"] == 0);
  CHECK(by_strategy["retrieve"] == 3);
  CHECK(by_strategy["replace"] == 3);
}

TEST_CASE("tiny corpus backfills the retrieval shortfall with replace") {
  std::vector<Caption> corpus = {
      make_caption("the gray ball moved",
                   {Tag::kOther, Tag::kJJ, Tag::kNN, Tag::kVB}, {{1, 2}}),
      make_caption("the red cube fell",
                   {Tag::kOther, Tag::kJJ, Tag::kNN, Tag::kVB}, {{1, 2}}),
  };
  std::vector<std::string> texts = {corpus[0].text, corpus[1].text};
  const TfidfIndex idx = build_tfidf_index(texts);
  PosVocabularies vocabs;
  vocabs.words[Tag::kJJ] = {"gray", "red", "blue", "green", "tiny", "huge"};
  vocabs.words[Tag::kNN] = {"ball", "cube", "cone", "disc", "ring"};
  std::mt19937_64 rng(11);
  const NegativeSet set = build_negative_set(corpus[0], 0, corpus, idx,
                                             vocabs, {2, 2, 2}, true, rng);
  CHECK(set.items.size() == 6);
  std::map<std::string, int> by_strategy;
  for (const auto& item : set.items) ++by_strategy[item.strategy];
  CHECK(by_strategy["retrieve"] == 1);  // only one other caption exists
  CHECK(by_strategy["replace"] >= 3);
}

TEST_CASE("negative sets serialize to the sidecar format") {
  const auto corpus = bird_corpus();
  std::vector<std::string> texts;
  for (const auto& c : corpus) texts.push_back(c.text);
  const TfidfIndex idx = build_tfidf_index(texts);
  const PosVocabularies vocabs = build_pos_vocabularies(corpus, 1);
  std::mt19937_64 rng(13);
  std::vector<NegativeSet> sets;
  for (int q = 0; q < 3; ++q) {
    sets.push_back(build_negative_set(corpus[size_t(q)], q, corpus, idx,
                                      vocabs, {2, 2, 2}, true, rng));
  }
  const auto dir =
      std::filesystem::temp_directory_path() / "idc_negatives_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "negs.jsonl").string();
  write_negatives_jsonl(path, sets);
  const auto loaded = load_negatives_jsonl(path);
  REQUIRE(loaded.size() == sets.size());
  for (size_t i = 0; i < sets.size(); ++i) {
    REQUIRE(loaded[i].items.size() == sets[i].items.size());
    for (size_t k = 0; k < sets[i].items.size(); ++k) {
      CHECK(loaded[i].items[k].caption.text == sets[i].items[k].caption.text);
      CHECK(loaded[i].items[k].strategy == sets[i].items[k].strategy);
    }
  }
  write_pos_vocabularies_json((dir / "vocabs.json").string(), vocabs);
  CHECK(std::filesystem::exists(dir / "vocabs.json"));
}

TEST_CASE("lexicon tagger and entity span detection") {
  const LexiconTagger tagger({{"ball", Tag::kNN}, {"red", Tag::kJJ}});
  const auto tags = tagger.tag({"the", "red", "ball"});
  CHECK(tags == std::vector<Tag>{Tag::kOther, Tag::kJJ, Tag::kNN});
  const auto spans =
      detect_entity_spans({"animal1", "beats", "animal2"},
                          {"animal1", "animal2"});
  REQUIRE(spans.size() == 2);
  CHECK(spans[0] == Span{0, 1});
  CHECK(spans[1] == Span{2, 1});
}
