#include "idc/model.hpp"

#include "json.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace idc {

using json = nlohmann::json;
using nn::Matrix;
using nn::Var;

void ModelConfig::validate() const {
  if (hidden < 1 || ffn_hidden < 1 || heads < 1 || cross_layers < 1 ||
      se_blocks < 1 || pe_blocks < 1) {
    throw std::invalid_argument("model config: counts must be >= 1");
  }
  if (hidden % heads != 0) {
    throw std::invalid_argument("model config: hidden must divide by heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("model config: dropout must be in [0,1)");
  }
  if (max_sent_len < 1 || vocab_size <= Vocabulary::kOov || visual_dim < 1 ||
      grid_size < 1) {
    throw std::invalid_argument("model config: bad dimensions");
  }
  if (num_classes < 0) {
    throw std::invalid_argument("model config: num_classes must be >= 0");
  }
}

bool ModelConfig::structure_equal(const ModelConfig& o) const {
  return hidden == o.hidden && ffn_hidden == o.ffn_hidden &&
         heads == o.heads && cross_layers == o.cross_layers &&
         se_blocks == o.se_blocks && pe_blocks == o.pe_blocks &&
         max_sent_len == o.max_sent_len && vocab_size == o.vocab_size &&
         visual_dim == o.visual_dim && grid_size == o.grid_size &&
         tie_mlm_head == o.tie_mlm_head && num_classes == o.num_classes;
}

namespace {

void config_to_json(const ModelConfig& c, json& j) {
  j["hidden"] = c.hidden;
  j["ffn_hidden"] = c.ffn_hidden;
  j["heads"] = c.heads;
  j["cross_layers"] = c.cross_layers;
  j["se_blocks"] = c.se_blocks;
  j["pe_blocks"] = c.pe_blocks;
  j["dropout"] = c.dropout;
  j["max_sent_len"] = c.max_sent_len;
  j["vocab_size"] = c.vocab_size;
  j["visual_dim"] = c.visual_dim;
  j["grid_size"] = c.grid_size;
  j["tie_mlm_head"] = c.tie_mlm_head;
  j["num_classes"] = c.num_classes;
  j["distractor_uses_pair"] = c.distractor_uses_pair;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.hidden = j.at("hidden").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.cross_layers = j.at("cross_layers").get<int>();
  c.se_blocks = j.at("se_blocks").get<int>();
  c.pe_blocks = j.at("pe_blocks").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.max_sent_len = j.at("max_sent_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.visual_dim = j.at("visual_dim").get<int>();
  c.grid_size = j.at("grid_size").get<int>();
  c.tie_mlm_head = j.at("tie_mlm_head").get<bool>();
  c.num_classes = j.at("num_classes").get<int>();
  c.distractor_uses_pair = j.at("distractor_uses_pair").get<bool>();
  return c;
}

void block_bidirectional(Matrix& allow, int off, int len) {
  allow.block(off, off, len, len).setOnes();
}

void exclude_segment(Matrix& allow, int off, int len) {
  allow.middleRows(off, len).setZero();
  allow.middleCols(off, len).setZero();
}

}  // namespace

AttentionMask build_attention_mask(MaskMode mode, int n_cells, int text_len,
                                   std::optional<int> padded_image) {
  if (n_cells < 1 || text_len < 1) {
    throw std::invalid_argument("attention mask: bad lengths");
  }
  AttentionMask m;
  m.n_cells = n_cells;
  m.text_len = text_len;
  const int total = m.total();
  const int vis_len = 2 * (1 + n_cells);
  const int t0 = m.text_offset();  // [CLS]
  m.allow = Matrix::Zero(total, total);
  if (mode == MaskMode::kPretrainBidir) {
    m.allow.setOnes();
  } else {
    // Visual tokens and [CLS] are mutually bidirectional and blind to
    // ordinary text; each text token sees them plus its causal prefix.
    block_bidirectional(m.allow, 0, vis_len + 1);
    for (int i = t0 + 1; i < total; ++i) {
      m.allow.row(i).head(vis_len + 1).setOnes();
      for (int j = t0 + 1; j <= i; ++j) m.allow(i, j) = 1.0;
    }
  }
  if (padded_image) {
    if (*padded_image != 1 && *padded_image != 2) {
      throw std::invalid_argument("attention mask: padded image must be 1|2");
    }
    exclude_segment(m.allow,
                    *padded_image == 1 ? m.img1_offset() : m.img2_offset(),
                    1 + n_cells);
  }
  return m;
}

AttentionMask build_causal_query_mask(int n_cells, int n_context,
                                      std::optional<int> padded_image) {
  if (n_cells < 1 || n_context < 1) {
    throw std::invalid_argument("causal query mask: bad lengths");
  }
  AttentionMask m;
  m.n_cells = n_cells;
  m.text_len = 1 + 2 * n_context;  // [CLS] + context + queries
  const int total = m.total();
  const int vis_len = 2 * (1 + n_cells);
  const int t0 = m.text_offset();
  const int c0 = t0 + 1;            // first context token ([BOS])
  const int q0 = c0 + n_context;    // first query token
  m.allow = Matrix::Zero(total, total);
  block_bidirectional(m.allow, 0, vis_len + 1);
  for (int c = 0; c < n_context; ++c) {
    m.allow.row(c0 + c).head(vis_len + 1).setOnes();
    for (int j = 0; j <= c; ++j) m.allow(c0 + c, c0 + j) = 1.0;
  }
  for (int q = 0; q < n_context; ++q) {
    m.allow.row(q0 + q).head(vis_len + 1).setOnes();
    // Query q predicts target q from [BOS],w_0..w_{q-1}: context 0..q.
    for (int j = 0; j <= q; ++j) m.allow(q0 + q, c0 + j) = 1.0;
    m.allow(q0 + q, q0 + q) = 1.0;  // the [MASK] sees itself
  }
  if (padded_image) {
    exclude_segment(m.allow,
                    *padded_image == 1 ? m.img1_offset() : m.img2_offset(),
                    1 + n_cells);
  }
  return m;
}

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto init = [&](int rows, int cols) {
    Matrix m(rows, cols);
    nn::trunc_normal_init(m, 0.02, rng);
    return m;
  };
  word_emb_ = add_param("word_emb", init(cfg_.vocab_size, cfg_.hidden));
  type_emb_ = add_param("type_emb", init(3, cfg_.hidden));
  vis_w_ = add_param("vis_w", init(cfg_.visual_dim, cfg_.hidden));
  vis_b_ = add_param("vis_b", Matrix::Zero(1, cfg_.hidden));
  // Embedding norm keeps token content and the O(1) positional signal on
  // comparable scales; without it the content path starts ~50x smaller.
  emb_ln_g_ = add_param("emb_ln_g", Matrix::Ones(1, cfg_.hidden));
  emb_ln_b_ = add_param("emb_ln_b", Matrix::Zero(1, cfg_.hidden));
  for (int i = 0; i < cfg_.se_blocks; ++i) {
    single_.push_back(make_layer("single." + std::to_string(i), rng));
  }
  for (int i = 0; i < cfg_.pe_blocks; ++i) {
    pair_.push_back(make_layer("pair." + std::to_string(i), rng));
  }
  for (int i = 0; i < cfg_.cross_layers; ++i) {
    cross_.push_back(make_layer("cross." + std::to_string(i), rng));
  }
  if (!cfg_.tie_mlm_head) {
    mlm_w_ = add_param("mlm_w", init(cfg_.hidden, cfg_.vocab_size));
  }
  mlm_b_ = add_param("mlm_b", Matrix::Zero(1, cfg_.vocab_size));
  dis_w_ = add_param("dis_w", init(2 * cfg_.hidden, 1));
  dis_b_ = add_param("dis_b", Matrix::Zero(1, 1));
  if (cfg_.num_classes > 0) {
    cls_w_ = add_param("cls_w", init(cfg_.hidden, cfg_.num_classes));
    cls_b_ = add_param("cls_b", Matrix::Zero(1, cfg_.num_classes));
    mtc_w_ = add_param("mtc_w", init(2 * cfg_.hidden, 1));
    mtc_b_ = add_param("mtc_b", Matrix::Zero(1, 1));
  }
  const int max_pos =
      std::max(cfg_.cells() + 1, cfg_.max_sent_len + 4);
  pos_table_ = nn::sinusoidal_positions(max_pos, cfg_.hidden);
}

Var Model::add_param(const std::string& name, Matrix value) {
  Var v = Var::leaf(std::move(value));
  params_.push_back({name, v});
  return v;
}

Model::Layer Model::make_layer(const std::string& prefix,
                               std::mt19937_64& rng) {
  auto init = [&](int rows, int cols) {
    Matrix m(rows, cols);
    nn::trunc_normal_init(m, 0.02, rng);
    return m;
  };
  const int h = cfg_.hidden, f = cfg_.ffn_hidden;
  Layer l;
  l.wq = add_param(prefix + ".wq", init(h, h));
  l.bq = add_param(prefix + ".bq", Matrix::Zero(1, h));
  l.wk = add_param(prefix + ".wk", init(h, h));
  l.bk = add_param(prefix + ".bk", Matrix::Zero(1, h));
  l.wv = add_param(prefix + ".wv", init(h, h));
  l.bv = add_param(prefix + ".bv", Matrix::Zero(1, h));
  l.wo = add_param(prefix + ".wo", init(h, h));
  l.bo = add_param(prefix + ".bo", Matrix::Zero(1, h));
  l.ln1_g = add_param(prefix + ".ln1_g", Matrix::Ones(1, h));
  l.ln1_b = add_param(prefix + ".ln1_b", Matrix::Zero(1, h));
  l.w1 = add_param(prefix + ".w1", init(h, f));
  l.b1 = add_param(prefix + ".b1", Matrix::Zero(1, f));
  l.w2 = add_param(prefix + ".w2", init(f, h));
  l.b2 = add_param(prefix + ".b2", Matrix::Zero(1, h));
  l.ln2_g = add_param(prefix + ".ln2_g", Matrix::Ones(1, h));
  l.ln2_b = add_param(prefix + ".ln2_b", Matrix::Zero(1, h));
  return l;
}

Var Model::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw std::out_of_range("no parameter named " + name);
}

Var Model::embed_image(const FeatureGrid& grid, int slot,
                       std::mt19937_64& rng, bool training) {
  if (slot != 1 && slot != 2) {
    throw std::invalid_argument("embed_image: slot must be 1|2");
  }
  if (grid.grid != cfg_.grid_size || grid.dim != cfg_.visual_dim) {
    throw std::invalid_argument("embed_image: grid dims do not match config");
  }
  const int n = cfg_.cells();
  Var cells = Var::leaf(grid.cells);
  Var proj = nn::add_rowvec(nn::matmul(cells, vis_w_), vis_b_);
  Var spec = nn::gather_rows(
      word_emb_, {slot == 1 ? Vocabulary::kImg1 : Vocabulary::kImg2});
  Var seq = nn::concat_rows({spec, proj});
  seq = nn::add(seq, Var::leaf(pos_table_.topRows(n + 1)));
  seq = nn::add_rowvec(seq, nn::slice_rows(type_emb_, slot - 1, 1));
  seq = nn::layer_norm(seq, emb_ln_g_, emb_ln_b_);
  return nn::dropout(seq, cfg_.dropout, rng, training);
}

Var Model::embed_text(const std::vector<int>& framed_ids,
                      std::mt19937_64& rng, bool training) {
  if (int(framed_ids.size()) > cfg_.max_sent_len + 3) {
    throw std::invalid_argument("embed_text: sequence exceeds max_sent_len");
  }
  std::vector<int> positions(framed_ids.size());
  for (size_t i = 0; i < framed_ids.size(); ++i) positions[i] = int(i);
  return embed_text_at(framed_ids, positions, rng, training);
}

Var Model::embed_text_at(const std::vector<int>& ids,
                         const std::vector<int>& positions,
                         std::mt19937_64& rng, bool training) {
  if (ids.empty() || ids.size() != positions.size()) {
    throw std::invalid_argument("embed_text: bad id/position lists");
  }
  Var seq = nn::gather_rows(word_emb_, ids);
  Matrix pos(ids.size(), cfg_.hidden);
  for (size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] >= pos_table_.rows()) {
      throw std::out_of_range("embed_text: position id out of table");
    }
    pos.row(Eigen::Index(i)) = pos_table_.row(positions[i]);
  }
  seq = nn::add(seq, Var::leaf(std::move(pos)));
  seq = nn::add_rowvec(seq, nn::slice_rows(type_emb_, 2, 1));
  seq = nn::layer_norm(seq, emb_ln_g_, emb_ln_b_);
  return nn::dropout(seq, cfg_.dropout, rng, training);
}

Var Model::mha(Layer& l, Var x, const Matrix& allow,
               std::vector<nn::Matrix>* capture) {
  const int dh = cfg_.hidden / cfg_.heads;
  Var q = nn::add_rowvec(nn::matmul(x, l.wq), l.bq);
  Var k = nn::add_rowvec(nn::matmul(x, l.wk), l.bk);
  Var v = nn::add_rowvec(nn::matmul(x, l.wv), l.bv);
  std::vector<Var> heads;
  for (int h = 0; h < cfg_.heads; ++h) {
    Var qh = nn::slice_cols(q, h * dh, dh);
    Var kh = nn::slice_cols(k, h * dh, dh);
    Var vh = nn::slice_cols(v, h * dh, dh);
    Var scores = nn::scale(nn::matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
    Var probs = nn::softmax_rows_masked(scores, allow);
    if (capture) capture->push_back(probs.value());
    heads.push_back(nn::matmul(probs, vh));
  }
  return nn::add_rowvec(nn::matmul(nn::concat_cols(heads), l.wo), l.bo);
}

Var Model::encode_layer(Layer& l, Var x, const Matrix& allow,
                        std::mt19937_64& rng, bool training,
                        std::vector<nn::Matrix>* capture) {
  Var attn = nn::dropout(mha(l, x, allow, capture), cfg_.dropout, rng,
                         training);
  x = nn::layer_norm(nn::add(x, attn), l.ln1_g, l.ln1_b);
  Var ff = nn::add_rowvec(
      nn::matmul(nn::gelu(nn::add_rowvec(nn::matmul(x, l.w1), l.b1)), l.w2),
      l.b2);
  ff = nn::dropout(ff, cfg_.dropout, rng, training);
  return nn::layer_norm(nn::add(x, ff), l.ln2_g, l.ln2_b);
}

Var Model::single_encode(Var x, std::mt19937_64& rng, bool training) {
  const Matrix allow = Matrix::Ones(x.rows(), x.rows());
  for (auto& l : single_) {
    x = encode_layer(l, x, allow, rng, training, nullptr);
  }
  return x;
}

std::pair<Var, Var> Model::pair_encode(Var v1, Var v2,
                                       std::optional<int> padded_image,
                                       std::mt19937_64& rng, bool training) {
  const int len1 = int(v1.rows()), len2 = int(v2.rows());
  Var x = nn::concat_rows({v1, v2});
  Matrix allow = Matrix::Ones(len1 + len2, len1 + len2);
  if (padded_image) {
    exclude_segment(allow, *padded_image == 1 ? 0 : len1,
                    *padded_image == 1 ? len1 : len2);
  }
  for (auto& l : pair_) {
    x = encode_layer(l, x, allow, rng, training, nullptr);
  }
  return {nn::slice_rows(x, 0, len1), nn::slice_rows(x, len1, len2)};
}

EncoderOutput Model::cross_encode(Var v1, Var v2, Var text,
                                  const AttentionMask& mask,
                                  std::mt19937_64& rng, bool training) {
  const int n1 = int(v1.rows());
  if (mask.total() != n1 + int(v2.rows() + text.rows())) {
    throw std::invalid_argument("cross_encode: mask does not fit sequence");
  }
  Var x = nn::concat_rows({v1, v2, text});
  EncoderOutput out;
  for (auto& l : cross_) {
    out.attention.emplace_back();
    x = encode_layer(l, x, mask.allow, rng, training, &out.attention.back());
  }
  out.v1 = nn::slice_rows(x, 0, n1);
  out.v2 = nn::slice_rows(x, n1, v2.rows());
  out.text = nn::slice_rows(x, n1 + v2.rows(), text.rows());
  return out;
}

std::pair<Var, Var> Model::encode_images(const FeatureGrid& img1,
                                         const FeatureGrid& img2,
                                         std::optional<int> padded_image,
                                         std::mt19937_64& rng,
                                         bool training) {
  Var e1 = embed_image(img1, 1, rng, training);
  Var e2 = embed_image(img2, 2, rng, training);
  // Padded-image positions stay out of every attention pool, single-image
  // encoder included, so its outputs cannot depend on padded cell values.
  auto run_single = [&](Var x, bool isolated) {
    const Matrix allow = isolated ? Matrix::Zero(x.rows(), x.rows())
                                  : Matrix::Ones(x.rows(), x.rows());
    for (auto& l : single_) {
      x = encode_layer(l, x, allow, rng, training, nullptr);
    }
    return x;
  };
  Var s1 = run_single(e1, padded_image && *padded_image == 1);
  Var s2 = run_single(e2, padded_image && *padded_image == 2);
  return pair_encode(s1, s2, padded_image, rng, training);
}

Var Model::mlm_logits(Var hidden_rows) {
  if (cfg_.tie_mlm_head) {
    return nn::add_rowvec(nn::matmul_nt(hidden_rows, word_emb_), mlm_b_);
  }
  return nn::add_rowvec(nn::matmul(hidden_rows, mlm_w_), mlm_b_);
}

Var Model::distractor_logit(Var v1_special, Var v2_special) {
  Var cat = nn::concat_cols({v1_special, v2_special});
  return nn::add_rowvec(nn::matmul(cat, dis_w_), dis_b_);
}

std::pair<Var, Var> Model::global_reps(const EncoderOutput& out) {
  Var visual = nn::scale(
      nn::add(nn::slice_rows(out.v1, 0, 1), nn::slice_rows(out.v2, 0, 1)),
      0.5);
  return {visual, nn::slice_rows(out.text, 0, 1)};
}

Var Model::project_visual(Var raw_rows) {
  return nn::add_rowvec(nn::matmul(raw_rows, vis_w_), vis_b_);
}

Var Model::class_logits(Var hidden_rows) {
  if (cfg_.num_classes <= 0) {
    throw std::logic_error("class_logits: model has no classification head");
  }
  return nn::add_rowvec(nn::matmul(hidden_rows, cls_w_), cls_b_);
}

Var Model::match_logit(Var v1_special, Var v2_special) {
  if (cfg_.num_classes <= 0) {
    throw std::logic_error("match_logit: model has no matching head");
  }
  Var cat = nn::concat_cols({v1_special, v2_special});
  return nn::add_rowvec(nn::matmul(cat, mtc_w_), mtc_b_);
}

void Model::exclude_pad_from_updates() {
  if (word_emb_.has_grad()) {
    word_emb_.grad().row(Vocabulary::kPad).setZero();
  }
}

nn::Matrix export_attention(const EncoderOutput& out, int layer, int head,
                            int query_pos, int image_slot, int grid_size) {
  if (layer < 0 || size_t(layer) >= out.attention.size()) {
    throw std::out_of_range("export_attention: layer");
  }
  const auto& heads = out.attention[size_t(layer)];
  if (head < 0 || size_t(head) >= heads.size()) {
    throw std::out_of_range("export_attention: head");
  }
  if (image_slot != 1 && image_slot != 2) {
    throw std::invalid_argument("export_attention: image slot must be 1|2");
  }
  const Matrix& attn = heads[size_t(head)];
  if (query_pos < 0 || query_pos >= attn.rows()) {
    throw std::out_of_range("export_attention: query position");
  }
  const int n = grid_size * grid_size;
  const int off = (image_slot == 1 ? 0 : n + 1) + 1;  // skip [IMG*] slots
  Matrix grid(grid_size, grid_size);
  for (int i = 0; i < n; ++i) {
    grid(i / grid_size, i % grid_size) = attn(query_pos, off + i);
  }
  return grid;
}

void write_heatmap_csv(const std::string& path, const Matrix& grid) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.cols(); ++j) {
      if (j) out << ",";
      out << grid(i, j);
    }
    out << "\n";
  }
}

Matrix read_heatmap_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.emplace_back();
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      rows.back().push_back(std::stod(cell));
    }
  }
  if (rows.empty()) throw std::runtime_error(path + ": empty heatmap");
  Matrix m(rows.size(), rows[0].size());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) {
      throw std::runtime_error(path + ": ragged heatmap");
    }
    for (size_t j = 0; j < rows[i].size(); ++j) {
      m(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
    }
  }
  return m;
}

namespace {
constexpr char kMagic[8] = {'I', 'D', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::string& path, const Model& model,
                     const Vocabulary& vocab, long step,
                     const nn::Adam* adam) {
  json header;
  config_to_json(model.config(), header["config"]);
  header["step"] = step;
  header["vocab"] = vocab.words();
  json arrays = json::array();
  for (const auto& p : model.params()) {
    json a;
    a["name"] = p.name;
    a["rows"] = p.var.rows();
    a["cols"] = p.var.cols();
    arrays.push_back(std::move(a));
  }
  header["arrays"] = std::move(arrays);
  header["adam_present"] = adam != nullptr;
  header["adam_step_count"] = adam ? adam->step_count() : 0;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), std::streamsize(hs.size()));
  auto write_matrix = [&out](const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      out.write(reinterpret_cast<const char*>(m.row(i).eval().data()),
                std::streamsize(sizeof(double) * size_t(m.cols())));
    }
  };
  for (const auto& p : model.params()) write_matrix(p.var.value());
  if (adam) {
    if (adam->m().size() != model.params().size()) {
      // Optimizer never stepped; store zero moments.
      for (const auto& p : model.params()) {
        write_matrix(Matrix::Zero(p.var.rows(), p.var.cols()));
      }
      for (const auto& p : model.params()) {
        write_matrix(Matrix::Zero(p.var.rows(), p.var.cols()));
      }
    } else {
      for (const auto& m : adam->m()) write_matrix(m);
      for (const auto& v : adam->v()) write_matrix(v);
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

Model load_checkpoint(const std::string& path, Vocabulary* vocab, long* step,
                      nn::Adam* adam, const ModelConfig* expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path + ": not a checkpoint file");
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), std::streamsize(hlen));
  if (!in) throw std::runtime_error(path + ": truncated header");
  json header = json::parse(hs);
  const ModelConfig cfg = config_from_json(header.at("config"));
  if (expect && !expect->structure_equal(cfg)) {
    throw std::runtime_error(path +
                             ": checkpoint config does not match expected "
                             "model structure");
  }
  Model model(cfg, /*seed=*/0);
  const auto& arrays = header.at("arrays");
  if (arrays.size() != model.params().size()) {
    throw std::runtime_error(path + ": parameter manifest mismatch");
  }
  auto read_matrix = [&in, &path](Matrix& m) {
    std::vector<double> buf(size_t(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      in.read(reinterpret_cast<char*>(buf.data()),
              std::streamsize(sizeof(double) * buf.size()));
      if (!in) throw std::runtime_error(path + ": truncated payload");
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        m(i, j) = buf[size_t(j)];
      }
    }
  };
  for (size_t i = 0; i < model.params().size(); ++i) {
    const auto& a = arrays[i];
    auto& p = model.params()[i];
    if (a.at("name").get<std::string>() != p.name ||
        a.at("rows").get<Eigen::Index>() != p.var.rows() ||
        a.at("cols").get<Eigen::Index>() != p.var.cols()) {
      throw std::runtime_error(path + ": parameter manifest mismatch at " +
                               p.name);
    }
    read_matrix(p.var.value());
  }
  if (vocab) {
    *vocab = Vocabulary::from_words(
        header.at("vocab").get<std::vector<std::string>>());
  }
  if (step) *step = header.at("step").get<long>();
  if (adam && header.at("adam_present").get<bool>()) {
    std::vector<Matrix> ms, vs;
    for (auto& p : model.params()) {
      Matrix m(p.var.rows(), p.var.cols());
      read_matrix(m);
      ms.push_back(std::move(m));
    }
    for (auto& p : model.params()) {
      Matrix v(p.var.rows(), p.var.cols());
      read_matrix(v);
      vs.push_back(std::move(v));
    }
    adam->restore(std::move(ms), std::move(vs),
                  header.at("adam_step_count").get<long>());
  }
  return model;
}

}  // namespace idc
