#include "idc/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <stdexcept>

namespace idc {

namespace {

const std::vector<std::string>& special_words() {
  static const std::vector<std::string> kSpecials = {
      "[PAD]", "[CLS]", "[BOS]", "[EOS]", "[MASK]", "[IMG1]", "[IMG2]"};
  return kSpecials;
}

}  // namespace

const std::string& tag_name(Tag t) {
  static const std::vector<std::string> kNames = {"NN", "NNS",   "JJ",
                                                  "JJR", "VB", "OTHER"};
  return kNames[size_t(t)];
}

Tag tag_from_name(const std::string& name) {
  if (name == "NN") return Tag::kNN;
  if (name == "NNS") return Tag::kNNS;
  if (name == "JJ") return Tag::kJJ;
  if (name == "JJR") return Tag::kJJR;
  if (name == "VB") return Tag::kVB;
  if (name == "OTHER") return Tag::kOther;
  throw std::invalid_argument("unknown POS tag: " + name);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& caption_texts,
                             int min_freq) {
  if (caption_texts.empty()) {
    throw std::invalid_argument("build_vocabulary: empty corpus");
  }
  std::map<std::string, int> freq;  // ordered for deterministic ids
  for (const auto& text : caption_texts) {
    for (const auto& w : split_words(text)) ++freq[w];
  }
  Vocabulary v;
  v.words_ = special_words();
  v.words_.push_back("[OOV]");
  for (const auto& [word, count] : freq) {
    if (count >= min_freq) v.words_.push_back(word);
  }
  for (size_t i = 0; i < v.words_.size(); ++i) {
    v.ids_[v.words_[i]] = int(i);
  }
  return v;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  if (int(words.size()) < kOov + 1) {
    throw std::invalid_argument("vocabulary word table too small");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (words[size_t(i)] != special_words()[size_t(i)]) {
      throw std::invalid_argument("vocabulary word table: bad special token");
    }
  }
  Vocabulary v;
  v.words_ = words;
  for (size_t i = 0; i < words.size(); ++i) v.ids_[words[i]] = int(i);
  return v;
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kOov : it->second;
}

const std::string& Vocabulary::word_of(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("word_of: bad id");
  return words_[size_t(id)];
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      cur.push_back(char(std::tolower(c)));
    } else {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      if (!std::isspace(c)) out.push_back(std::string(1, char(c)));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids = {Vocabulary::kCls, Vocabulary::kBos};
  for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word_of(id);
  }
  return out;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace idc
