#pragma once

#include "idc/corpus.hpp"
#include "idc/nn.hpp"
#include "idc/vocab.hpp"

#include <optional>
#include <string>
#include <vector>

namespace idc {

struct ModelConfig {
  int hidden = 64;
  int ffn_hidden = 128;
  int heads = 4;
  int cross_layers = 2;
  int se_blocks = 1;
  int pe_blocks = 1;
  double dropout = 0.2;
  int max_sent_len = 40;  // word tokens per caption, frame specials excluded
  int vocab_size = 0;
  int visual_dim = 32;
  int grid_size = 4;
  bool tie_mlm_head = false;
  int num_classes = 0;  // classification head width; 0 = head absent
  bool distractor_uses_pair = false;  // judge from pair-encoder outputs

  int cells() const { return grid_size * grid_size; }
  void validate() const;
  bool structure_equal(const ModelConfig& o) const;
};

enum class MaskMode { kPretrainBidir, kFinetuneCausal, kInferenceCausal };

// Boolean (0/1) permission matrix over the concatenated sequence
// [IMG1]+cells | [IMG2]+cells | [CLS]+text.
struct AttentionMask {
  nn::Matrix allow;
  int n_cells = 0;
  int text_len = 0;  // text segment length including [CLS]

  int img1_offset() const { return 0; }
  int img2_offset() const { return 1 + n_cells; }
  int text_offset() const { return 2 * (1 + n_cells); }
  int total() const { return text_offset() + text_len; }
};

AttentionMask build_attention_mask(MaskMode mode, int n_cells, int text_len,
                                   std::optional<int> padded_image = {});

// Mask for the teacher-forced caption objective. Text layout after [CLS]:
// n_context tokens [BOS],w_0..w_M attending causally, then n_context [MASK]
// queries; query j sees context positions <= j plus itself, and nothing
// attends a query.
AttentionMask build_causal_query_mask(int n_cells, int n_context,
                                      std::optional<int> padded_image = {});

struct EncoderOutput {
  nn::Var v1;    // (1+N) x hidden, [IMG1] slot first
  nn::Var v2;    // (1+N) x hidden
  nn::Var text;  // text_len x hidden, [CLS] slot first
  // attention[layer][head]: L x L, rows sum to 1 over allowed positions
  std::vector<std::vector<nn::Matrix>> attention;
};

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<nn::NamedParam>& params() { return params_; }
  const std::vector<nn::NamedParam>& params() const { return params_; }
  nn::Var param(const std::string& name) const;

  // [IMG1]/[IMG2] special embedding + projected cells + positions + type.
  nn::Var embed_image(const FeatureGrid& grid, int slot, std::mt19937_64& rng,
                      bool training);
  nn::Var embed_text(const std::vector<int>& framed_ids, std::mt19937_64& rng,
                     bool training);
  // Same, with explicit per-token text positions (query blocks).
  nn::Var embed_text_at(const std::vector<int>& ids,
                        const std::vector<int>& positions,
                        std::mt19937_64& rng, bool training);

  nn::Var single_encode(nn::Var x, std::mt19937_64& rng, bool training);
  std::pair<nn::Var, nn::Var> pair_encode(nn::Var v1, nn::Var v2,
                                          std::optional<int> padded_image,
                                          std::mt19937_64& rng, bool training);
  EncoderOutput cross_encode(nn::Var v1, nn::Var v2, nn::Var text,
                             const AttentionMask& mask, std::mt19937_64& rng,
                             bool training);

  // Full difference-encoder path: embed both images, single- then
  // pair-encode.
  std::pair<nn::Var, nn::Var> encode_images(const FeatureGrid& img1,
                                            const FeatureGrid& img2,
                                            std::optional<int> padded_image,
                                            std::mt19937_64& rng,
                                            bool training);

  nn::Var mlm_logits(nn::Var hidden_rows);
  nn::Var distractor_logit(nn::Var v1_special, nn::Var v2_special);
  std::pair<nn::Var, nn::Var> global_reps(const EncoderOutput& out);
  // Projects raw visual feature rows into the hidden comparison space.
  nn::Var project_visual(nn::Var raw_rows);
  nn::Var class_logits(nn::Var hidden_rows);
  nn::Var match_logit(nn::Var v1_special, nn::Var v2_special);

  // Zeroes the [PAD] row of the word-embedding gradient (kept out of
  // optimizer updates by contract).
  void exclude_pad_from_updates();

  const nn::Matrix& position_table() const { return pos_table_; }

 private:
  struct Layer {
    nn::Var wq, bq, wk, bk, wv, bv, wo, bo;
    nn::Var ln1_g, ln1_b, ln2_g, ln2_b;
    nn::Var w1, b1, w2, b2;
  };

  nn::Var mha(Layer& l, nn::Var x, const nn::Matrix& allow,
              std::vector<nn::Matrix>* capture);
  nn::Var encode_layer(Layer& l, nn::Var x, const nn::Matrix& allow,
                       std::mt19937_64& rng, bool training,
                       std::vector<nn::Matrix>* capture);
  Layer make_layer(const std::string& prefix, std::mt19937_64& rng);
  nn::Var add_param(const std::string& name, nn::Matrix value);

  ModelConfig cfg_;
  std::vector<nn::NamedParam> params_;
  nn::Var word_emb_, type_emb_, vis_w_, vis_b_;
  std::vector<Layer> single_, pair_, cross_;
  nn::Var mlm_w_, mlm_b_;  // mlm_w_ absent when tied
  nn::Var dis_w_, dis_b_;
  nn::Var cls_w_, cls_b_;  // present when num_classes > 0
  nn::Var mtc_w_, mtc_b_;
  nn::Matrix pos_table_;
};

// G x G slice of one image's attention row.
nn::Matrix export_attention(const EncoderOutput& out, int layer, int head,
                            int query_pos, int image_slot, int grid_size);
void write_heatmap_csv(const std::string& path, const nn::Matrix& grid);
nn::Matrix read_heatmap_csv(const std::string& path);

// Self-describing checkpoint: format version, config, vocabulary, named
// parameter arrays, optimizer moments, step counter.
void save_checkpoint(const std::string& path, const Model& model,
                     const Vocabulary& vocab, long step,
                     const nn::Adam* adam = nullptr);
Model load_checkpoint(const std::string& path, Vocabulary* vocab = nullptr,
                      long* step = nullptr, nn::Adam* adam = nullptr,
                      const ModelConfig* expect = nullptr);

}  // namespace idc
