#pragma once

#include "idc/nn.hpp"
#include "idc/vocab.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace idc {

enum class ChangeType { kColor, kTexture, kMove, kAdd, kDrop, kDistractor, kNone };
constexpr int kNumSynthChangeTypes = 6;  // everything but kNone

const std::string& change_type_name(ChangeType t);
ChangeType change_type_from_name(const std::string& name);

// Token index range of an entity mention inside a caption's word sequence.
struct Span {
  int start = 0;
  int len = 0;
  bool operator==(const Span&) const = default;
};

struct Caption {
  std::string text;            // normalized (lowercase, space-separated)
  std::vector<int> tokens;     // word ids (no frame specials); empty until
                               // assign_token_ids
  std::vector<Tag> pos_tags;   // one per word
  std::vector<Span> subject_spans;
};

// Fills Caption::tokens from the text; checks tag count against word count.
void assign_token_ids(Caption& c, const Vocabulary& vocab);

struct FeatureGrid {
  enum class Source { kSynthetic, kIngested, kZeroPadded };

  int grid = 0;
  int dim = 0;
  nn::Matrix cells;  // (grid*grid) x dim, flattened row-major
  Source source = Source::kSynthetic;

  int num_cells() const { return grid * grid; }
  bool all_zero() const { return cells.size() == 0 || cells.isZero(0.0); }
  static FeatureGrid zero(int grid, int dim);
};

struct Triplet {
  FeatureGrid img1, img2;
  Caption caption;
  ChangeType change_type = ChangeType::kNone;
  std::optional<std::string> class1, class2;
  bool is_pseudo = false;
};

// --- synthetic scenes ---

struct SceneObject {
  int shape = 0, color = 0, size = 0, material = 0;
  int row = 0, col = 0;
};

struct SyntheticScene {
  int grid = 0;
  std::vector<SceneObject> objects;  // at most one per cell
};

struct SynthConfig {
  int grid = 4;
  int feature_dim = 32;
  // Per-type counts ordered color, texture, move, add, drop, distractor.
  std::array<int, kNumSynthChangeTypes> train_counts{};
  std::array<int, kNumSynthChangeTypes> val_counts{};
  std::array<int, kNumSynthChangeTypes> test_counts{};
  int objects_min = 2;
  int objects_max = 4;
  double render_noise = 0.01;
  double jitter_amplitude = 0.05;
  // 0 = full attribute palettes; otherwise only the first k entries of each
  // attribute list are drawn (shrinks the distinct-scene space).
  int palette_limit = 0;
};

// Distributes a split total over the six change types (largest first).
std::array<int, kNumSynthChangeTypes> spread_counts(int total);

struct SyntheticDataset {
  std::vector<Triplet> train, val, test;
  int grid = 0;
  int dim = 0;
};

// Deterministic for a fixed seed; splits are scene-disjoint. Throws when the
// requested counts exhaust the distinct-scene capacity.
SyntheticDataset generate_synthetic_dataset(const SynthConfig& cfg,
                                            uint64_t seed);

// Template lexicon support (used by tests and the lexicon tagger).
// Returns every distinct word any template expansion can produce.
std::vector<std::string> synthetic_template_lexicon();
// word -> tag map covering the synthetic templates (for tagging ingested
// text that follows the same domain).
std::vector<std::pair<std::string, Tag>> synthetic_tag_lexicon();

// Stable 64-bit content hash of an (img1, img2) pair, for split-disjointness
// checks.
uint64_t pair_hash(const FeatureGrid& a, const FeatureGrid& b);

// --- JSONL serialization ---

struct CaptionPair {
  FeatureGrid img;
  Caption caption;
};

struct ClassifiedImage {
  FeatureGrid img;
  std::string label;
};

void write_triplets(const std::string& path,
                    const std::vector<Triplet>& records, int grid, int dim);
std::vector<Triplet> load_triplets(const std::string& path);

void write_caption_pairs(const std::string& path,
                         const std::vector<CaptionPair>& records, int grid,
                         int dim);
std::vector<CaptionPair> load_caption_pairs(const std::string& path);

void write_classified_images(const std::string& path,
                             const std::vector<ClassifiedImage>& records,
                             int grid, int dim);
std::vector<ClassifiedImage> load_classified_images(const std::string& path);

// Grid/dim recorded in a dataset's sidecar header.
struct DatasetHeader {
  int grid = 0;
  int dim = 0;
  int version = 1;
};
DatasetHeader read_dataset_header(const std::string& jsonl_path);

}  // namespace idc
