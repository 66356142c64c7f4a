#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "idc/objectives.hpp"
#include "idc/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace idc;
using nn::Matrix;
using nn::Var;

namespace {

std::string tmpdir(const std::string& leaf) {
  const auto dir = std::filesystem::temp_directory_path() / leaf;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// Tiny synthetic world shared by the loss tests.
struct World {
  SyntheticDataset ds;
  Vocabulary vocab;
  ModelConfig cfg;

  explicit World(uint64_t seed = 11, int per_type = 3) {
    SynthConfig sc;
    sc.grid = 2;
    sc.feature_dim = 6;
    sc.objects_min = 2;
    sc.objects_max = 3;
    sc.train_counts = {per_type, per_type, per_type,
                       per_type, per_type, per_type};
    sc.val_counts = {1, 1, 1, 1, 1, 1};
    sc.test_counts = {1, 1, 1, 1, 1, 1};
    ds = generate_synthetic_dataset(sc, seed);
    std::vector<std::string> texts;
    for (const auto& t : ds.train) texts.push_back(t.caption.text);
    vocab = Vocabulary::build(texts, 1);
    for (auto* split : {&ds.train, &ds.val, &ds.test}) {
      for (auto& t : *split) assign_token_ids(t.caption, vocab);
    }
    cfg.hidden = 16;
    cfg.ffn_hidden = 32;
    cfg.heads = 2;
    cfg.cross_layers = 1;
    cfg.se_blocks = 1;
    cfg.pe_blocks = 1;
    cfg.dropout = 0.0;
    cfg.max_sent_len = 20;
    cfg.vocab_size = vocab.size();
    cfg.visual_dim = 6;
    cfg.grid_size = 2;
  }
};

std::vector<int> frame(const std::vector<int>& words) {
  std::vector<int> out = {Vocabulary::kCls, Vocabulary::kBos};
  out.insert(out.end(), words.begin(), words.end());
  out.push_back(Vocabulary::kEos);
  return out;
}

}  // namespace

TEST_CASE("mask_text: counts, minimum one, specials untouched") {
  const Vocabulary vocab =
      Vocabulary::build({"a b c d e f g h i j k l m n o p q r s t"}, 1);
  std::mt19937_64 rng(3);
  std::vector<int> words;
  for (int i = 0; i < 20; ++i) words.push_back(Vocabulary::kOov + 1 + i);
  const MaskedText m20 = mask_text(frame(words), vocab, rng);
  CHECK(m20.masked_positions.size() == 3);  // round(0.15*20)

  const MaskedText m1 =
      mask_text(frame({Vocabulary::kOov + 1}), vocab, rng);
  CHECK(m1.masked_positions.size() == 1);
  CHECK(m1.masked_positions[0] == 2);  // the only ordinary word

  for (int trial = 0; trial < 200; ++trial) {
    const MaskedText mt = mask_text(frame(words), vocab, rng);
    CHECK(mt.input.front() == Vocabulary::kCls);
    CHECK(mt.input[1] == Vocabulary::kBos);
    CHECK(mt.input.back() == Vocabulary::kEos);
    for (size_t i = 0; i < mt.masked_positions.size(); ++i) {
      CHECK(mt.targets[i] == frame(words)[size_t(mt.masked_positions[i])]);
    }
  }
  CHECK_THROWS(mask_text({Vocabulary::kCls, Vocabulary::kBos,
                          Vocabulary::kEos},
                         vocab, rng));
}

TEST_CASE("mask_text corruption statistics at reduced scale") {
  const Vocabulary vocab =
      Vocabulary::build({"a b c d e f g h i j k l m n o p q r s t"}, 1);
  std::mt19937_64 rng(5);
  std::vector<int> words;
  for (int i = 0; i < 20; ++i) words.push_back(Vocabulary::kOov + 1 + i);
  const auto framed = frame(words);
  long n_mask = 0, n_random = 0, n_keep = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    const MaskedText mt = mask_text(framed, vocab, rng);
    for (size_t i = 0; i < mt.masked_positions.size(); ++i) {
      const int pos = mt.masked_positions[i];
      const int now = mt.input[size_t(pos)];
      if (now == Vocabulary::kMask) {
        ++n_mask;
      } else if (now == mt.targets[i]) {
        ++n_keep;
      } else {
        ++n_random;
        CHECK(now >= Vocabulary::kOov);  // never a special
      }
    }
  }
  const double total = double(n_mask + n_random + n_keep);
  CHECK(n_mask / total == doctest::Approx(0.80).epsilon(0.03));
  // The unchanged bucket absorbs random draws that happen to hit the
  // original id, so compare against the exact random-hit rate instead.
  CHECK(n_keep / total > 0.08);
  CHECK(n_keep / total < 0.13);
}

TEST_CASE("mask_visual: counts, single image, pseudo handling") {
  World w;
  std::mt19937_64 rng(7);
  FeatureGrid g16;
  g16.grid = 4;
  g16.dim = 4;
  g16.cells = Matrix::Random(16, 4);
  const MaskedVisual mv = mask_visual(g16, g16, false, rng);
  CHECK(mv.masked_cells.size() == 2);  // round(0.15*16)

  std::set<int> images_seen;
  for (int trial = 0; trial < 500; ++trial) {
    const MaskedVisual m = mask_visual(g16, g16, false, rng);
    images_seen.insert(m.masked_image);
    const FeatureGrid& corrupted = m.masked_image == 1 ? m.img1 : m.img2;
    const FeatureGrid& untouched = m.masked_image == 1 ? m.img2 : m.img1;
    for (int c : m.masked_cells) {
      CHECK(corrupted.cells.row(c).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK((untouched.cells - g16.cells).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(images_seen == std::set<int>{1, 2});

  for (int trial = 0; trial < 100; ++trial) {
    CHECK(mask_visual(g16, g16, true, rng).masked_image == 1);
  }
}

TEST_CASE("loss_mlm is finite and errors without masked positions") {
  World w;
  Model model(w.cfg, 21);
  std::mt19937_64 rng(9);
  std::vector<const Triplet*> batch = {&w.ds.train[0], &w.ds.train[1]};
  const auto instances = build_mlm_batch(batch, w.vocab, rng);
  Var loss = loss_mlm(model, instances, rng, false);
  CHECK(std::isfinite(loss.scalar()));
  CHECK(loss.scalar() > 0.0);
  auto broken = instances;
  broken[0].masked.masked_positions.clear();
  broken[0].masked.targets.clear();
  CHECK_THROWS(loss_mlm(model, broken, rng, false));
}

TEST_CASE("loss_mvcl matches a hand-built NCE on its own encodings") {
  World w;
  Model model(w.cfg, 22);
  std::mt19937_64 rng(11);
  std::vector<const Triplet*> batch = {&w.ds.train[2]};
  const auto instances = build_mvcl_batch(batch, rng);
  Var loss = loss_mvcl(model, instances, 1.0, rng, false);
  CHECK(std::isfinite(loss.scalar()));
  CHECK(loss.scalar() > 0.0);

  // Pseudo triplets only ever mask the real image and skip padded cells in
  // the negative pool.
  Triplet pseudo = w.ds.train[0];
  pseudo.img2 = FeatureGrid::zero(w.cfg.grid_size, w.cfg.visual_dim);
  pseudo.is_pseudo = true;
  std::vector<const Triplet*> pb = {&pseudo};
  const auto pi = build_mvcl_batch(pb, rng);
  CHECK(pi[0].masked.masked_image == 1);
  Var ploss = loss_mvcl(model, pi, 1.0, rng, false);
  CHECK(std::isfinite(ploss.scalar()));
}

TEST_CASE("pseudo-triplet losses ignore padded-image values") {
  World w;
  Model model(w.cfg, 23);
  Triplet pseudo = w.ds.train[0];
  pseudo.img2 = FeatureGrid::zero(w.cfg.grid_size, w.cfg.visual_dim);
  pseudo.is_pseudo = true;

  auto mlm_value = [&](const Triplet& t) {
    std::mt19937_64 rng(13);  // same masking draws both times
    std::vector<const Triplet*> batch = {&t};
    return loss_mlm(model, build_mlm_batch(batch, w.vocab, rng), rng, false)
        .scalar();
  };
  const double base = mlm_value(pseudo);
  Triplet junk = pseudo;
  junk.img2.cells.setConstant(123.0);
  const double poked = mlm_value(junk);
  CHECK(base == doctest::Approx(poked).epsilon(1e-12));
}

TEST_CASE("loss_fda closed-form style checks and error paths") {
  World w;
  Model model(w.cfg, 24);
  std::mt19937_64 rng(15);
  NegativeSet negs;
  for (int i = 1; i <= 2; ++i) {
    NegativeRecord rec;
    rec.caption = w.ds.train[size_t(i)].caption;
    rec.strategy = "retrieve";
    negs.items.push_back(rec);
  }
  const FdaContrast contrast =
      build_fda_batch(w.ds.train[0], negs, w.vocab);
  CHECK(contrast.negatives.size() == 2);
  Var loss = loss_fda(model, {contrast}, 1.0, rng, false);
  CHECK(std::isfinite(loss.scalar()));

  FdaContrast empty = contrast;
  empty.negatives.clear();
  CHECK_THROWS(loss_fda(model, {empty}, 1.0, rng, false));
}

TEST_CASE("contrastive losses are exactly invariant to power-of-two rescaling") {
  // Cosine similarity cancels any positive scale; powers of two keep the
  // floating-point arithmetic bit-exact.
  std::mt19937_64 rng(17);
  Matrix anchors = Matrix::Random(3, 8);
  Matrix pos = Matrix::Random(3, 8);
  Matrix negs = Matrix::Random(5, 8);
  auto value = [&](double scale_pos, double scale_neg) {
    Var a = nn::l2_normalize_rows(Var::leaf(anchors));
    Var p = nn::l2_normalize_rows(Var::leaf(pos * scale_pos));
    Var n = nn::l2_normalize_rows(Var::leaf(negs * scale_neg));
    return nn::nce_loss(nn::rowwise_dot(a, p), nn::matmul_nt(a, n), 1.0)
        .scalar();
  };
  CHECK(value(1.0, 1.0) == value(4.0, 1.0));
  CHECK(value(1.0, 1.0) == value(1.0, 0.5));
  CHECK(value(1.0, 1.0) == value(8.0, 2.0));
}

TEST_CASE("fda loss strictly decreases as positive similarity rises") {
  Var negs = Var::leaf(Matrix::Random(1, 6));
  double prev = 1e9;
  for (double s = -1.0; s <= 1.0; s += 0.25) {
    const double v =
        nn::nce_loss(Var::leaf(Matrix::Constant(1, 1, s)), negs, 1.0)
            .scalar();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("schedule_batches realizes ratios exactly") {
  const auto counts = [](const std::vector<Task>& tasks) {
    std::array<int, 3> c{0, 0, 0};
    for (Task t : tasks) ++c[size_t(t)];
    return c;
  };
  const auto a = counts(schedule_batches({8, 1, 2}, 110));
  CHECK(a == std::array<int, 3>{80, 10, 20});
  const auto b = counts(schedule_batches({9, 1, 2}, 120));
  CHECK(b == std::array<int, 3>{90, 10, 20});
  const auto c = counts(schedule_batches({1, 0, 0}, 25));
  CHECK(c == std::array<int, 3>{25, 0, 0});
  // Draw mode long-run frequencies stay near the ratio.
  TaskSchedule draw{8, 1, 2};
  draw.draw_mode = true;
  const auto d = counts(schedule_batches(draw, 11000));
  CHECK(d[0] / 11000.0 == doctest::Approx(8.0 / 11).epsilon(0.05));
}

TEST_CASE("pretrain: zero steps writes an init checkpoint, seeds reproduce") {
  World w(31, 2);
  const std::string dir0 = tmpdir("idc_obj_pre0");
  Model m0(w.cfg, 1234);
  PretrainOptions opt;
  opt.steps = 0;
  opt.batch_size = 4;
  opt.out_dir = dir0;
  opt.schedule = {1, 0, 0};
  const PretrainResult r0 = pretrain(m0, w.ds.train, {}, w.vocab, opt);
  CHECK(std::filesystem::exists(r0.checkpoint_path));
  long step = -1;
  Model restored = load_checkpoint(r0.checkpoint_path, nullptr, &step);
  CHECK(step == 0);

  // Two identical runs: byte-identical logs and checkpoints.
  auto run = [&](const std::string& dir) {
    Model m(w.cfg, 1234);
    PretrainOptions o;
    o.steps = 12;
    o.batch_size = 4;
    o.lr = 1e-3;
    o.out_dir = dir;
    o.schedule = {8, 1, 2};
    o.seed = 1234;
    std::vector<NegativeSet> negs;
    for (size_t i = 0; i < w.ds.train.size(); ++i) {
      NegativeSet ns;
      for (int k = 1; k <= 2; ++k) {
        NegativeRecord rec;
        rec.caption = w.ds.train[(i + size_t(k)) % w.ds.train.size()].caption;
        rec.strategy = "retrieve";
        ns.items.push_back(rec);
      }
      negs.push_back(ns);
    }
    return pretrain(m, w.ds.train, negs, w.vocab, o);
  };
  const auto ra = run(tmpdir("idc_obj_prea"));
  const auto rb = run(tmpdir("idc_obj_preb"));
  CHECK(slurp(ra.log_path) == slurp(rb.log_path));
  CHECK(slurp(ra.checkpoint_path) == slurp(rb.checkpoint_path));
  CHECK(slurp(ra.log_path).find("mlm") != std::string::npos);
}

TEST_CASE("pad row never receives updates during pretraining") {
  World w(33, 2);
  Model m(w.cfg, 55);
  const Matrix pad_before =
      m.param("word_emb").value().row(Vocabulary::kPad);
  PretrainOptions opt;
  opt.steps = 6;
  opt.batch_size = 4;
  opt.lr = 1e-3;
  opt.out_dir = tmpdir("idc_obj_pad");
  opt.schedule = {1, 1, 0};
  pretrain(m, w.ds.train, {}, w.vocab, opt);
  const Matrix pad_after =
      m.param("word_emb").value().row(Vocabulary::kPad);
  CHECK((pad_before - pad_after).cwiseAbs().maxCoeff() == 0.0);
}
