#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace idc {

// Closed tag set carried by every caption token.
enum class Tag { kNN, kNNS, kJJ, kJJR, kVB, kOther };

const std::string& tag_name(Tag t);
Tag tag_from_name(const std::string& name);

// Word <-> id map. Ids 0..6 are the fixed special tokens, id 7 is the
// out-of-vocabulary bucket, ordinary words follow in lexicographic order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kMask = 4;
  static constexpr int kImg1 = 5;
  static constexpr int kImg2 = 6;
  static constexpr int kOov = 7;
  static constexpr int kNumSpecials = 7;  // excludes the OOV bucket

  // Words with corpus frequency >= min_freq get their own id; the rest hit
  // the OOV bucket. Throws on an empty corpus.
  static Vocabulary build(const std::vector<std::string>& caption_texts,
                          int min_freq);
  // Rebuilds from an explicit id -> word table (checkpoint restore).
  static Vocabulary from_words(const std::vector<std::string>& words);

  int id_of(const std::string& word) const;  // OOV id when unknown
  const std::string& word_of(int id) const;
  int size() const { return int(words_.size()); }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

// Lowercases and splits into word tokens; runs of alphanumerics are words,
// any other non-space character becomes its own token.
std::vector<std::string> split_words(const std::string& text);

// [CLS],[BOS],w_0..w_M,[EOS] id sequence; unknown words map to OOV.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);

// Word ids -> normalized text (specials skipped, words joined by spaces).
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

// Canonical text form: lowercased, tokens joined by single spaces.
std::string normalize_text(const std::string& text);

}  // namespace idc
