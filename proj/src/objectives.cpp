#include "idc/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace idc {

using nn::Matrix;
using nn::Var;

namespace {

int masked_count(int eligible) {
  return std::max(1, int(std::lround(0.15 * double(eligible))));
}

// Draws k distinct entries from [0, n) by partial Fisher-Yates.
std::vector<int> draw_distinct(int n, int k, std::mt19937_64& rng) {
  std::vector<int> pool(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) pool[size_t(i)] = i;
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(pool[size_t(i)], pool[size_t(pick(rng))]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + k);
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<int> padded_slot(const Triplet& t) {
  if (t.is_pseudo || t.img2.all_zero()) return 2;
  return std::nullopt;
}

}  // namespace

MaskedText mask_text(const std::vector<int>& framed, const Vocabulary& vocab,
                     std::mt19937_64& rng) {
  std::vector<int> eligible;
  for (size_t i = 0; i < framed.size(); ++i) {
    if (!vocab.is_special(framed[i])) eligible.push_back(int(i));
  }
  if (eligible.empty()) {
    throw std::invalid_argument("mask_text: caption has no ordinary word");
  }
  const int k = masked_count(int(eligible.size()));
  MaskedText out;
  out.input = framed;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> word(Vocabulary::kOov,
                                          vocab.size() - 1);
  for (int idx : draw_distinct(int(eligible.size()), k, rng)) {
    const int pos = eligible[size_t(idx)];
    out.masked_positions.push_back(pos);
    out.targets.push_back(framed[size_t(pos)]);
    const double u = coin(rng);
    if (u < 0.8) {
      out.input[size_t(pos)] = Vocabulary::kMask;
    } else if (u < 0.9) {
      out.input[size_t(pos)] = word(rng);
    }  // else unchanged
  }
  return out;
}

MaskedVisual mask_visual(const FeatureGrid& img1, const FeatureGrid& img2,
                         bool img2_padded, std::mt19937_64& rng) {
  MaskedVisual out;
  out.img1 = img1;
  out.img2 = img2;
  if (img2_padded) {
    out.masked_image = 1;
  } else {
    std::uniform_int_distribution<int> side(1, 2);
    out.masked_image = side(rng);
  }
  FeatureGrid& target = out.masked_image == 1 ? out.img1 : out.img2;
  const int n = target.num_cells();
  const int k = masked_count(n);
  out.masked_cells = draw_distinct(n, k, rng);
  out.originals.resize(k, target.dim);
  for (int i = 0; i < k; ++i) {
    out.originals.row(i) = target.cells.row(out.masked_cells[size_t(i)]);
    target.cells.row(out.masked_cells[size_t(i)]).setZero();
  }
  return out;
}

Triplet augment_triplet(const Triplet& t, double noise_amplitude,
                        std::mt19937_64& rng) {
  Triplet out = t;
  const int n = t.img1.num_cells();
  std::vector<int> perm(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) perm[size_t(i)] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < n; ++i) {
    out.img1.cells.row(i) = t.img1.cells.row(perm[size_t(i)]);
    out.img2.cells.row(i) = t.img2.cells.row(perm[size_t(i)]);
  }
  if (noise_amplitude > 0.0) {
    std::uniform_real_distribution<double> noise(-noise_amplitude,
                                                 noise_amplitude);
    auto jitter = [&](nn::Matrix& cells, bool padded) {
      if (padded) return;  // zero-padded images stay exactly zero
      for (Eigen::Index i = 0; i < cells.rows(); ++i) {
        for (Eigen::Index j = 0; j < cells.cols(); ++j) {
          cells(i, j) += noise(rng);
        }
      }
    };
    jitter(out.img1.cells, out.img1.all_zero());
    jitter(out.img2.cells, out.img2.all_zero());
  }
  return out;
}

std::vector<MlmInstance> build_mlm_batch(
    const std::vector<const Triplet*>& items, const Vocabulary& vocab,
    std::mt19937_64& rng) {
  std::vector<MlmInstance> out;
  for (const Triplet* t : items) {
    std::vector<int> framed = {Vocabulary::kCls, Vocabulary::kBos};
    framed.insert(framed.end(), t->caption.tokens.begin(),
                  t->caption.tokens.end());
    framed.push_back(Vocabulary::kEos);
    out.push_back({t, mask_text(framed, vocab, rng)});
  }
  return out;
}

nn::Var loss_mlm(Model& model, const std::vector<MlmInstance>& batch,
                 std::mt19937_64& rng, bool training) {
  if (batch.empty()) throw std::invalid_argument("loss_mlm: empty batch");
  std::vector<Var> weighted;
  long total_masked = 0;
  for (const auto& inst : batch) {
    const Triplet& t = *inst.triplet;
    if (inst.masked.masked_positions.empty()) {
      throw std::invalid_argument("loss_mlm: instance with no masked position");
    }
    auto [v1, v2] = model.encode_images(t.img1, t.img2, padded_slot(t), rng,
                                        training);
    Var text = model.embed_text(inst.masked.input, rng, training);
    const AttentionMask mask = build_attention_mask(
        MaskMode::kPretrainBidir, model.config().cells(),
        int(inst.masked.input.size()), padded_slot(t));
    EncoderOutput out = model.cross_encode(v1, v2, text, mask, rng, training);
    std::vector<Var> rows;
    for (int pos : inst.masked.masked_positions) {
      rows.push_back(nn::slice_rows(out.text, pos, 1));
    }
    Var logits = model.mlm_logits(nn::concat_rows(rows));
    Var ce = nn::cross_entropy_mean(logits, inst.masked.targets);
    const long k = long(inst.masked.targets.size());
    weighted.push_back(nn::scale(ce, double(k)));
    total_masked += k;
  }
  Var sum = weighted[0];
  for (size_t i = 1; i < weighted.size(); ++i) sum = nn::add(sum, weighted[i]);
  return nn::scale(sum, 1.0 / double(total_masked));
}

std::vector<MvclInstance> build_mvcl_batch(
    const std::vector<const Triplet*>& items, std::mt19937_64& rng) {
  std::vector<MvclInstance> out;
  for (const Triplet* t : items) {
    out.push_back(
        {t, mask_visual(t->img1, t->img2, padded_slot(*t).has_value(), rng)});
  }
  return out;
}

nn::Var loss_mvcl(Model& model, const std::vector<MvclInstance>& batch,
                  double tau1, std::mt19937_64& rng, bool training) {
  if (batch.empty()) throw std::invalid_argument("loss_mvcl: empty batch");
  std::vector<Var> anchor_rows;
  std::vector<Matrix> positive_rows;
  std::vector<Matrix> negative_rows;
  for (const auto& inst : batch) {
    const Triplet& t = *inst.triplet;
    auto [v1, v2] = model.encode_images(inst.masked.img1, inst.masked.img2,
                                        padded_slot(t), rng, training);
    std::vector<int> framed = {Vocabulary::kCls, Vocabulary::kBos};
    framed.insert(framed.end(), t.caption.tokens.begin(),
                  t.caption.tokens.end());
    framed.push_back(Vocabulary::kEos);
    Var text = model.embed_text(framed, rng, training);
    const AttentionMask mask =
        build_attention_mask(MaskMode::kPretrainBidir, model.config().cells(),
                             int(framed.size()), padded_slot(t));
    EncoderOutput out = model.cross_encode(v1, v2, text, mask, rng, training);
    const Var& masked_img = inst.masked.masked_image == 1 ? out.v1 : out.v2;
    std::set<int> masked(inst.masked.masked_cells.begin(),
                         inst.masked.masked_cells.end());
    for (size_t i = 0; i < inst.masked.masked_cells.size(); ++i) {
      anchor_rows.push_back(nn::slice_rows(
          masked_img, inst.masked.masked_cells[i] + 1, 1));  // +1: [IMG*]
      positive_rows.push_back(inst.masked.originals.row(Eigen::Index(i)));
    }
    // Negative pool: every unmasked cell of every non-padded image in the
    // batch (padded pseudo cells carry no content and stay out).
    auto add_unmasked = [&](const FeatureGrid& orig, bool is_masked_img) {
      for (int c = 0; c < orig.num_cells(); ++c) {
        if (is_masked_img && masked.count(c)) continue;
        negative_rows.push_back(orig.cells.row(c));
      }
    };
    add_unmasked(t.img1, inst.masked.masked_image == 1);
    if (!padded_slot(t)) add_unmasked(t.img2, inst.masked.masked_image == 2);
  }
  if (negative_rows.empty()) {
    throw std::invalid_argument("loss_mvcl: empty negative pool");
  }
  const int dv = model.config().visual_dim;
  Matrix pos(positive_rows.size(), dv), neg(negative_rows.size(), dv);
  for (size_t i = 0; i < positive_rows.size(); ++i) {
    pos.row(Eigen::Index(i)) = positive_rows[i];
  }
  for (size_t i = 0; i < negative_rows.size(); ++i) {
    neg.row(Eigen::Index(i)) = negative_rows[i];
  }
  Var anchors = nn::l2_normalize_rows(nn::concat_rows(anchor_rows));
  Var pos_emb = nn::l2_normalize_rows(model.project_visual(Var::leaf(pos)));
  Var neg_emb = nn::l2_normalize_rows(model.project_visual(Var::leaf(neg)));
  Var s_pos = nn::rowwise_dot(anchors, pos_emb);
  Var s_neg = nn::matmul_nt(anchors, neg_emb);
  return nn::nce_loss(s_pos, s_neg, tau1);
}

FdaContrast build_fda_batch(const Triplet& triplet, const NegativeSet& negs,
                            const Vocabulary& vocab) {
  FdaContrast out;
  out.triplet = &triplet;
  out.positive = tokenize(triplet.caption.text, vocab);
  for (const auto& item : negs.items) {
    out.negatives.push_back(tokenize(item.caption.text, vocab));
  }
  return out;
}

nn::Var loss_fda(Model& model, const std::vector<FdaContrast>& batch,
                 double tau2, std::mt19937_64& rng, bool training) {
  if (batch.empty()) throw std::invalid_argument("loss_fda: empty batch");
  std::vector<Var> losses;
  for (const auto& inst : batch) {
    if (inst.negatives.empty()) {
      throw std::invalid_argument("loss_fda: contrast without negatives");
    }
    const Triplet& t = *inst.triplet;
    auto [v1, v2] =
        model.encode_images(t.img1, t.img2, padded_slot(t), rng, training);
    auto encode_caption = [&](const std::vector<int>& framed) {
      Var text = model.embed_text(framed, rng, training);
      const AttentionMask mask = build_attention_mask(
          MaskMode::kPretrainBidir, model.config().cells(),
          int(framed.size()), padded_slot(t));
      EncoderOutput out =
          model.cross_encode(v1, v2, text, mask, rng, training);
      auto [vis, txt] = model.global_reps(out);
      return nn::rowwise_dot(nn::l2_normalize_rows(vis),
                             nn::l2_normalize_rows(txt));  // 1x1 cosine
    };
    Var s_pos = encode_caption(inst.positive);
    std::vector<Var> s_negs;
    for (const auto& framed : inst.negatives) {
      s_negs.push_back(encode_caption(framed));
    }
    losses.push_back(nn::nce_loss(s_pos, nn::concat_cols(s_negs), tau2));
  }
  Var sum = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) sum = nn::add(sum, losses[i]);
  return nn::scale(sum, 1.0 / double(losses.size()));
}

const std::string& task_name(Task t) {
  static const std::vector<std::string> kNames = {"mlm", "mvcl", "fda"};
  return kNames[size_t(t)];
}

std::vector<Task> schedule_batches(const TaskSchedule& schedule, int steps) {
  if (schedule.mlm < 0 || schedule.mvcl < 0 || schedule.fda < 0 ||
      schedule.mlm + schedule.mvcl + schedule.fda == 0) {
    throw std::invalid_argument("schedule: ratio must be nonnegative, nonzero");
  }
  if (steps < 0) throw std::invalid_argument("schedule: negative steps");
  const int ratio[3] = {schedule.mlm, schedule.mvcl, schedule.fda};
  std::vector<Task> out;
  out.reserve(size_t(steps));
  if (schedule.draw_mode) {
    std::mt19937_64 rng(schedule.seed);
    std::discrete_distribution<int> pick(
        {double(ratio[0]), double(ratio[1]), double(ratio[2])});
    for (int i = 0; i < steps; ++i) out.push_back(Task(pick(rng)));
    return out;
  }
  // Fixed repeating block; within the block, tasks interleave by largest
  // remainder so counts are exact for every multiple of the block length.
  const int block = ratio[0] + ratio[1] + ratio[2];
  std::vector<Task> pattern;
  int emitted[3] = {0, 0, 0};
  for (int i = 1; i <= block; ++i) {
    int best = -1;
    double best_deficit = -1.0;
    for (int tsk = 0; tsk < 3; ++tsk) {
      const double deficit =
          double(ratio[tsk]) * double(i) / double(block) - emitted[tsk];
      if (deficit > best_deficit + 1e-12 ||
          (std::abs(deficit - best_deficit) <= 1e-12 && best >= 0 &&
           ratio[tsk] > ratio[best])) {
        best = tsk;
        best_deficit = deficit;
      }
    }
    ++emitted[best];
    pattern.push_back(Task(best));
  }
  for (int i = 0; i < steps; ++i) {
    out.push_back(pattern[size_t(i % block)]);
  }
  return out;
}

nn::Var pretrain_task_loss(Model& model, Task task,
                           const std::vector<const Triplet*>& batch,
                           const std::vector<const NegativeSet*>& negatives,
                           const Vocabulary& vocab, double tau1, double tau2,
                           std::mt19937_64& rng, bool training) {
  switch (task) {
    case Task::kMlm:
      return loss_mlm(model, build_mlm_batch(batch, vocab, rng), rng,
                      training);
    case Task::kMvcl:
      return loss_mvcl(model, build_mvcl_batch(batch, rng), tau1, rng,
                       training);
    case Task::kFda: {
      std::vector<FdaContrast> contrasts;
      for (size_t i = 0; i < batch.size(); ++i) {
        contrasts.push_back(
            build_fda_batch(*batch[i], *negatives[i], vocab));
      }
      return loss_fda(model, contrasts, tau2, rng, training);
    }
  }
  throw std::logic_error("pretrain_task_loss: bad task");
}

BatchSampler::BatchSampler(size_t n, uint64_t seed) : n_(n), rng_(seed) {
  if (n_ == 0) throw std::invalid_argument("BatchSampler: empty dataset");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_);
  for (size_t i = 0; i < n_; ++i) order_[i] = i;
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<size_t> BatchSampler::next(size_t batch_size) {
  std::vector<size_t> out;
  while (out.size() < batch_size) {
    if (cursor_ == n_) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

double warmup_lr(double peak, int warmup_steps, long step) {
  if (warmup_steps <= 0) return peak;
  return peak * std::min(1.0, double(step + 1) / double(warmup_steps));
}

PretrainResult pretrain(Model& model, const std::vector<Triplet>& train,
                        const std::vector<NegativeSet>& negatives,
                        const Vocabulary& vocab, const PretrainOptions& opt) {
  if (train.empty()) throw std::invalid_argument("pretrain: empty dataset");
  if (opt.schedule.fda > 0 && negatives.size() != train.size()) {
    throw std::invalid_argument(
        "pretrain: FDA scheduled but negatives do not cover the dataset");
  }
  std::filesystem::create_directories(opt.out_dir);
  const std::string log_path = opt.out_dir + "/pretrain_log.csv";
  const std::string ckpt_path = opt.out_dir + "/pretrain.ckpt";
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  log << "step,task,loss,lr\n";

  nn::Adam adam(0.9, 0.999, 1e-8, opt.weight_decay);
  const auto tasks = schedule_batches(opt.schedule, opt.steps);
  std::mt19937_64 rng(opt.seed);
  BatchSampler sampler(train.size(), opt.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::string tag =
      opt.source_tag.empty() ? "" : opt.source_tag + ":";

  std::vector<Triplet> staged(size_t(opt.batch_size));
  for (int step = 0; step < opt.steps; ++step) {
    const Task task = tasks[size_t(step)];
    std::vector<const Triplet*> batch;
    std::vector<const NegativeSet*> negs;
    size_t slot = 0;
    for (size_t idx : sampler.next(size_t(opt.batch_size))) {
      if (opt.augment) {
        staged[slot] = augment_triplet(train[idx], opt.augment_noise, rng);
        batch.push_back(&staged[slot++]);
      } else {
        batch.push_back(&train[idx]);
      }
      negs.push_back(task == Task::kFda ? &negatives[idx] : nullptr);
    }
    Var loss = pretrain_task_loss(model, task, batch, negs, vocab, opt.tau1,
                                  opt.tau2, rng, /*training=*/true);
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
      throw std::runtime_error("pretrain: non-finite " + task_name(task) +
                               " loss at step " + std::to_string(step));
    }
    nn::backward(loss);
    model.exclude_pad_from_updates();
    const double lr = warmup_lr(opt.lr, opt.warmup_steps, step);
    adam.step(model.params(), lr);
    if (step % std::max(1, opt.log_every) == 0) {
      log << step << "," << tag << task_name(task) << ","
          << std::setprecision(17) << value << "," << std::setprecision(17)
          << lr << "\n";
    }
    if (opt.checkpoint_every > 0 && (step + 1) % opt.checkpoint_every == 0) {
      save_checkpoint(ckpt_path, model, vocab, step + 1, &adam);
    }
  }
  save_checkpoint(ckpt_path, model, vocab, opt.steps, &adam);
  log.flush();
  return {opt.steps, ckpt_path, log_path};
}

}  // namespace idc
