#include "idc/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>

namespace idc {

using nn::Matrix;
using nn::Var;

namespace {

std::optional<int> padded_slot(const Triplet& t) {
  if (t.is_pseudo || t.img2.all_zero()) return 2;
  return std::nullopt;
}

// Caption loss for one triplet under the causal query mask; returns the
// per-position CE mean and the target count.
std::pair<Var, long> caption_loss_one(Model& model, const Triplet& t,
                                      std::mt19937_64& rng, bool training,
                                      EncoderOutput* out_capture = nullptr) {
  const auto& words = t.caption.tokens;
  const int n_ctx = int(words.size()) + 1;  // [BOS] + words
  std::vector<int> ids = {Vocabulary::kCls, Vocabulary::kBos};
  ids.insert(ids.end(), words.begin(), words.end());
  std::vector<int> positions(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) positions[i] = int(i);
  std::vector<int> targets = words;
  targets.push_back(Vocabulary::kEos);
  for (int q = 0; q < n_ctx; ++q) {
    ids.push_back(Vocabulary::kMask);
    positions.push_back(q + 2);  // the query's inference-time text position
  }
  auto [v1, v2] = model.encode_images(t.img1, t.img2, padded_slot(t), rng,
                                      training);
  Var text = model.embed_text_at(ids, positions, rng, training);
  const AttentionMask mask = build_causal_query_mask(
      model.config().cells(), n_ctx, padded_slot(t));
  EncoderOutput out = model.cross_encode(v1, v2, text, mask, rng, training);
  Var queries = nn::slice_rows(out.text, 1 + n_ctx, n_ctx);
  Var logits = model.mlm_logits(queries);
  if (out_capture) *out_capture = out;
  return {nn::cross_entropy_mean(logits, targets), long(n_ctx)};
}

}  // namespace

void FinetuneConfig::validate() const {
  if (steps < 0 || batch_size < 1 || patience < 1 || max_gen_len < 0) {
    throw std::invalid_argument("finetune config: bad counts");
  }
  if (lambda_distractor < 0.0) {
    throw std::invalid_argument("finetune config: lambda must be >= 0");
  }
  if (main_metric != "cider" && main_metric != "rouge_l") {
    throw std::invalid_argument(
        "finetune config: main metric must be cider or rouge_l");
  }
}

FinetuneStepLoss finetune_step_loss(Model& model,
                                    const std::vector<const Triplet*>& batch,
                                    double lambda_distractor,
                                    std::mt19937_64& rng, bool training) {
  if (batch.empty()) {
    throw std::invalid_argument("finetune_step_loss: empty batch");
  }
  std::vector<Var> weighted;
  long total_targets = 0;
  std::vector<Var> distractor_logits;
  std::vector<double> distractor_labels;
  for (const Triplet* t : batch) {
    EncoderOutput out;
    auto [ce, k] = caption_loss_one(model, *t, rng, training,
                                    lambda_distractor > 0.0 ? &out : nullptr);
    weighted.push_back(nn::scale(ce, double(k)));
    total_targets += k;
    if (lambda_distractor > 0.0) {
      Var v1s, v2s;
      if (model.config().distractor_uses_pair) {
        auto [p1, p2] = model.encode_images(t->img1, t->img2, padded_slot(*t),
                                            rng, training);
        v1s = nn::slice_rows(p1, 0, 1);
        v2s = nn::slice_rows(p2, 0, 1);
      } else {
        v1s = nn::slice_rows(out.v1, 0, 1);
        v2s = nn::slice_rows(out.v2, 0, 1);
      }
      distractor_logits.push_back(model.distractor_logit(v1s, v2s));
      distractor_labels.push_back(
          t->change_type == ChangeType::kDistractor ? 1.0 : 0.0);
    }
  }
  FinetuneStepLoss out;
  Var sum = weighted[0];
  for (size_t i = 1; i < weighted.size(); ++i) sum = nn::add(sum, weighted[i]);
  out.caption = nn::scale(sum, 1.0 / double(total_targets));
  if (lambda_distractor > 0.0) {
    out.distractor = nn::bce_with_logits_mean(
        nn::concat_rows(distractor_logits), distractor_labels);
    out.total =
        nn::add(out.caption, nn::scale(out.distractor, lambda_distractor));
  } else {
    out.total = out.caption;
  }
  return out;
}

double distractor_probability(Model& model, const Triplet& t) {
  std::mt19937_64 rng(0);  // eval mode draws nothing
  std::vector<int> ids = {Vocabulary::kCls, Vocabulary::kBos,
                          Vocabulary::kMask};
  Var v1s, v2s;
  if (model.config().distractor_uses_pair) {
    auto [p1, p2] =
        model.encode_images(t.img1, t.img2, padded_slot(t), rng, false);
    v1s = nn::slice_rows(p1, 0, 1);
    v2s = nn::slice_rows(p2, 0, 1);
  } else {
    auto [v1, v2] =
        model.encode_images(t.img1, t.img2, padded_slot(t), rng, false);
    Var text = model.embed_text(ids, rng, false);
    const AttentionMask mask =
        build_attention_mask(MaskMode::kInferenceCausal,
                             model.config().cells(), int(ids.size()),
                             padded_slot(t));
    EncoderOutput out = model.cross_encode(v1, v2, text, mask, rng, false);
    v1s = nn::slice_rows(out.v1, 0, 1);
    v2s = nn::slice_rows(out.v2, 0, 1);
  }
  const double logit = model.distractor_logit(v1s, v2s).scalar();
  return 1.0 / (1.0 + std::exp(-logit));
}

std::string greedy_generate(Model& model, const FeatureGrid& img1,
                            const FeatureGrid& img2, const Vocabulary& vocab,
                            int max_len) {
  if (max_len < 0) throw std::invalid_argument("greedy_generate: max_len");
  std::mt19937_64 rng(0);  // eval mode draws nothing
  std::optional<int> padded;
  if (img2.all_zero()) padded = 2;
  auto [v1, v2] = model.encode_images(img1, img2, padded, rng, false);
  std::vector<int> words;
  while (int(words.size()) < max_len) {
    std::vector<int> ids = {Vocabulary::kCls, Vocabulary::kBos};
    ids.insert(ids.end(), words.begin(), words.end());
    ids.push_back(Vocabulary::kMask);
    const AttentionMask mask = build_attention_mask(
        MaskMode::kInferenceCausal, model.config().cells(), int(ids.size()),
        padded);
    Var text = model.embed_text(ids, rng, false);
    EncoderOutput out = model.cross_encode(v1, v2, text, mask, rng, false);
    Var logits =
        model.mlm_logits(nn::slice_rows(out.text, int(ids.size()) - 1, 1));
    // Argmax over generable ids: ordinary words plus [EOS]; ties fall to
    // the lowest id by scan order.
    const auto& row = logits.value();
    int best = Vocabulary::kEos;
    double best_score = row(0, Vocabulary::kEos);
    for (int id = Vocabulary::kOov; id < vocab.size(); ++id) {
      if (row(0, id) > best_score) {
        best = id;
        best_score = row(0, id);
      }
    }
    if (best == Vocabulary::kEos) break;
    words.push_back(best);
  }
  return detokenize(words, vocab);
}

Triplet make_pseudo_triplet(const FeatureGrid& img, const Caption& caption) {
  Triplet t;
  t.img1 = img;
  t.img2 = FeatureGrid::zero(img.grid, img.dim);
  t.caption = caption;
  t.change_type = ChangeType::kNone;
  t.is_pseudo = true;
  return t;
}

FgvcPairBatch sample_fgvc_pairs(const std::vector<ClassifiedImage>& images,
                                int n, double p_same, std::mt19937_64& rng) {
  if (images.size() < 2) {
    throw std::invalid_argument("sample_fgvc_pairs: need at least two images");
  }
  if (p_same < 0.0 || p_same > 1.0) {
    throw std::invalid_argument("sample_fgvc_pairs: p_same must be in [0,1]");
  }
  std::map<std::string, std::vector<int>> by_class;
  for (size_t i = 0; i < images.size(); ++i) {
    by_class[images[i].label].push_back(int(i));
  }
  // Ordered same-class pairs (a != b), flattened for uniform draws.
  long total_same = 0;
  std::vector<std::pair<const std::vector<int>*, long>> class_offsets;
  for (const auto& [label, members] : by_class) {
    const long k = long(members.size());
    class_offsets.emplace_back(&members, total_same);
    total_same += k * (k - 1);
  }
  const int want_same = int(std::lround(p_same * double(n)));
  if (want_same > 0 && total_same == 0) {
    throw std::invalid_argument(
        "sample_fgvc_pairs: no class has two images; cannot build same-class "
        "pairs");
  }
  if (want_same < n && by_class.size() < 2) {
    throw std::invalid_argument(
        "sample_fgvc_pairs: a single class cannot build different-class "
        "pairs");
  }
  FgvcPairBatch out;
  for (int i = 0; i < want_same; ++i) {
    std::uniform_int_distribution<long> pick(0, total_same - 1);
    long idx = pick(rng);
    for (const auto& [members, offset] : class_offsets) {
      const long k = long(members->size());
      const long span = k * (k - 1);
      if (idx >= offset && idx < offset + span) {
        const long local = idx - offset;
        const long a = local / (k - 1);
        long b = local % (k - 1);
        if (b >= a) ++b;
        out.pairs.push_back(
            {(*members)[size_t(a)], (*members)[size_t(b)], true});
        break;
      }
    }
  }
  std::uniform_int_distribution<size_t> any(0, images.size() - 1);
  for (int i = want_same; i < n; ++i) {
    size_t a = any(rng), b = any(rng);
    while (images[a].label == images[b].label) {
      a = any(rng);
      b = any(rng);
    }
    out.pairs.push_back({int(a), int(b), false});
  }
  std::shuffle(out.pairs.begin(), out.pairs.end(), rng);
  return out;
}

std::map<std::string, int> build_class_index(
    const std::vector<ClassifiedImage>& images) {
  std::set<std::string> labels;
  for (const auto& img : images) labels.insert(img.label);
  std::map<std::string, int> out;
  int next = 0;
  for (const auto& l : labels) out[l] = next++;
  return out;
}

FgvcLosses loss_fgvc(Model& model, const std::vector<ClassifiedImage>& images,
                     const FgvcPairBatch& batch,
                     const std::map<std::string, int>& class_index,
                     double tau_con, std::mt19937_64& rng, bool training) {
  if (batch.pairs.empty()) {
    throw std::invalid_argument("loss_fgvc: empty batch");
  }
  std::vector<Var> img_tokens;  // single-encoder [IMG] rows, 2 per pair
  std::vector<int> labels;
  std::vector<Var> match_logits;
  std::vector<double> match_targets;
  for (const auto& p : batch.pairs) {
    Var e1 = model.embed_image(images[size_t(p.a)].img, 1, rng, training);
    Var e2 = model.embed_image(images[size_t(p.b)].img, 2, rng, training);
    Var s1 = model.single_encode(e1, rng, training);
    Var s2 = model.single_encode(e2, rng, training);
    img_tokens.push_back(nn::slice_rows(s1, 0, 1));
    img_tokens.push_back(nn::slice_rows(s2, 0, 1));
    labels.push_back(class_index.at(images[size_t(p.a)].label));
    labels.push_back(class_index.at(images[size_t(p.b)].label));
    auto [o1, o2] = model.pair_encode(s1, s2, std::nullopt, rng, training);
    match_logits.push_back(
        model.match_logit(nn::slice_rows(o1, 0, 1), nn::slice_rows(o2, 0, 1)));
    match_targets.push_back(p.same_class ? 1.0 : 0.0);
  }
  Var reps = nn::concat_rows(img_tokens);
  FgvcLosses out;
  out.cls = nn::cross_entropy_mean(model.class_logits(reps), labels);
  out.mtc =
      nn::bce_with_logits_mean(nn::concat_rows(match_logits), match_targets);

  // Supervised contrastive pull on normalized [IMG] representations:
  // logsumexp over non-self rows minus the mean positive similarity.
  const int n = int(labels.size());
  Var z = nn::l2_normalize_rows(reps);
  Var sims = nn::scale(nn::matmul_nt(z, z), 1.0 / tau_con);
  Matrix self_block = Matrix::Zero(n, n);
  Matrix pos_mask = Matrix::Zero(n, n);
  Eigen::VectorXd pos_count = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    self_block(i, i) = -1e30;  // exact exclusion under exp()
    for (int j = 0; j < n; ++j) {
      if (i != j && labels[size_t(i)] == labels[size_t(j)]) {
        pos_mask(i, j) = 1.0;
        pos_count(i) += 1.0;
      }
    }
  }
  Matrix anchor_w = Matrix::Zero(n, 1);
  double anchors = 0.0;
  Matrix inv_count = Matrix::Zero(n, n);  // row-scaled positive mask
  for (int i = 0; i < n; ++i) {
    if (pos_count(i) > 0.0) {
      anchor_w(i, 0) = 1.0;
      anchors += 1.0;
      for (int j = 0; j < n; ++j) {
        inv_count(i, j) = pos_mask(i, j) / pos_count(i);
      }
    }
  }
  if (anchors == 0.0) {
    out.con = Var::leaf(Matrix::Zero(1, 1));  // no same-class pair in batch
  } else {
    Var denom = nn::logsumexp_rows(nn::add(sims, Var::leaf(self_block)));
    Var pos_mean = nn::matmul(nn::mul(sims, Var::leaf(inv_count)),
                              Var::leaf(Matrix::Ones(n, 1)));
    Var per_anchor = nn::mul(nn::sub(denom, pos_mean), Var::leaf(anchor_w));
    out.con = nn::scale(nn::sum_all(per_anchor), 1.0 / anchors);
  }
  out.total = nn::add(nn::add(out.cls, out.con), out.mtc);
  return out;
}

double caption_metric(const std::string& name,
                      const std::vector<EvalItem>& items) {
  if (name == "cider") return cider(items, CiderVariant::kPlain);
  if (name == "rouge_l") return rouge_l(items);
  throw std::invalid_argument("unknown main metric: " + name);
}

std::vector<EvalItem> generate_eval_items(Model& model,
                                          const std::vector<Triplet>& split,
                                          const Vocabulary& vocab,
                                          int max_len) {
  std::vector<EvalItem> items;
  for (size_t i = 0; i < split.size(); ++i) {
    EvalItem item;
    item.id = std::to_string(i);
    item.hypothesis =
        greedy_generate(model, split[i].img1, split[i].img2, vocab, max_len);
    item.references = {split[i].caption.text};
    item.change_type = change_type_name(split[i].change_type);
    items.push_back(std::move(item));
  }
  return items;
}

bool should_stop(const std::vector<double>& history, int patience) {
  if (patience < 1) throw std::invalid_argument("should_stop: patience >= 1");
  if (history.empty()) return false;
  double best = history[0];
  int since = 0;
  for (size_t i = 1; i < history.size(); ++i) {
    if (history[i] > best) {
      best = history[i];
      since = 0;
    } else if (++since >= patience) {
      return true;
    }
  }
  return false;
}

int best_metric_index(const std::vector<double>& history) {
  if (history.empty()) return -1;
  int best = 0;
  for (size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[size_t(best)]) best = int(i);
  }
  return best;
}

FinetuneResult finetune(Model& model, const std::vector<Triplet>& train,
                        const std::vector<Triplet>& val,
                        const Vocabulary& vocab, const FinetuneConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("finetune: empty train set");
  std::filesystem::create_directories(cfg.out_dir);
  const std::string log_path = cfg.out_dir + "/finetune_log.csv";
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  log << "step,task,loss,lr\n";

  FinetuneResult result;
  result.log_path = log_path;
  result.final_checkpoint = cfg.out_dir + "/finetune.ckpt";
  result.best_checkpoint = cfg.out_dir + "/finetune_best.ckpt";

  nn::Adam adam(0.9, 0.999, 1e-8, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed);
  BatchSampler sampler(train.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const bool do_eval = cfg.eval_every > 0 && !val.empty();
  bool saved_best = false;

  std::vector<Triplet> staged(size_t(cfg.batch_size));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Triplet*> batch;
    size_t slot = 0;
    for (size_t idx : sampler.next(size_t(cfg.batch_size))) {
      if (cfg.augment) {
        staged[slot] = augment_triplet(train[idx], cfg.augment_noise, rng);
        batch.push_back(&staged[slot++]);
      } else {
        batch.push_back(&train[idx]);
      }
    }
    FinetuneStepLoss losses = finetune_step_loss(
        model, batch, cfg.lambda_distractor, rng, /*training=*/true);
    const double total = losses.total.scalar();
    if (!std::isfinite(total)) {
      throw std::runtime_error("finetune: non-finite loss at step " +
                               std::to_string(step));
    }
    nn::backward(losses.total);
    model.exclude_pad_from_updates();
    const double lr = warmup_lr(cfg.lr, cfg.warmup_steps, step);
    adam.step(model.params(), lr);
    if (step % std::max(1, cfg.log_every) == 0) {
      log << step << ",caption," << std::setprecision(17)
          << losses.caption.scalar() << "," << lr << "\n";
      if (cfg.lambda_distractor > 0.0) {
        log << step << ",distractor," << std::setprecision(17)
            << losses.distractor.scalar() << "," << lr << "\n";
      }
    }
    if (do_eval && (step + 1) % cfg.eval_every == 0) {
      const auto items =
          generate_eval_items(model, val, vocab, cfg.max_gen_len);
      const double metric = caption_metric(cfg.main_metric, items);
      result.metric_history.push_back(metric);
      log << step << ",val_" << cfg.main_metric << ","
          << std::setprecision(17) << metric << "," << lr << "\n";
      if (metric > result.best_metric || !saved_best) {
        result.best_metric = metric;
        result.best_eval = int(result.metric_history.size()) - 1;
        save_checkpoint(result.best_checkpoint, model, vocab, step + 1,
                        &adam);
        saved_best = true;
      }
      if (should_stop(result.metric_history, cfg.patience)) break;
    }
  }
  save_checkpoint(result.final_checkpoint, model, vocab, cfg.steps, &adam);
  if (!saved_best) {
    // No evaluation ran; the final model doubles as the best one.
    save_checkpoint(result.best_checkpoint, model, vocab, cfg.steps, &adam);
    if (do_eval) result.best_metric = 0.0;
  }
  return result;
}

std::vector<bool> interleave_pattern(int a, int b, int steps) {
  if (a < 0 || b < 0 || a + b == 0) {
    throw std::invalid_argument("interleave_pattern: bad ratio");
  }
  std::vector<bool> out;  // true = a-side
  int emitted_a = 0, emitted_b = 0;
  const int block = a + b;
  for (int i = 0; i < steps; ++i) {
    if (i % block == 0) {
      emitted_a = 0;
      emitted_b = 0;
    }
    const int phase = i % block + 1;
    const double want_a = double(a) * double(phase) / double(block);
    const double want_b = double(b) * double(phase) / double(block);
    const double da = want_a - emitted_a;
    const double db = want_b - emitted_b;
    if (da >= db) {  // a-side wins ties
      out.push_back(true);
      ++emitted_a;
    } else {
      out.push_back(false);
      ++emitted_b;
    }
  }
  return out;
}

TwoStageResult two_stage_pretrain(
    Model& model, const std::vector<Triplet>& gic_pseudo,
    const std::vector<NegativeSet>& gic_negatives,
    const std::vector<ClassifiedImage>& fgvc_images,
    const std::vector<Triplet>& idc_train,
    const std::vector<NegativeSet>& idc_negatives, const Vocabulary& vocab,
    const TwoStageOptions& opt) {
  TwoStageResult result;
  // Stage 1: the three pre-training tasks on pseudo-triplets.
  if (!gic_pseudo.empty()) {
    PretrainOptions s1 = opt.stage1;
    s1.source_tag = "gic";
    const PretrainResult r1 = pretrain(model, gic_pseudo, gic_negatives,
                                       vocab, s1);
    result.stage1_log = r1.log_path;
  }

  // Stage 2: FGVC batches interleaved with the IDC task schedule.
  const PretrainOptions& s2 = opt.stage2;
  std::filesystem::create_directories(s2.out_dir);
  const std::string log_path = s2.out_dir + "/two_stage_log.csv";
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  log << "step,task,loss,lr\n";
  result.stage2_log = log_path;
  result.checkpoint_path = s2.out_dir + "/two_stage.ckpt";

  const auto slots = interleave_pattern(opt.fgvc_ratio, opt.idc_ratio,
                                        s2.steps);
  const auto idc_tasks = schedule_batches(s2.schedule, s2.steps);
  std::mt19937_64 rng(s2.seed);
  nn::Adam adam(0.9, 0.999, 1e-8, s2.weight_decay);
  BatchSampler idc_sampler(idc_train.size(),
                           s2.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto class_index = build_class_index(fgvc_images);
  if (model.config().num_classes != int(class_index.size())) {
    throw std::invalid_argument(
        "two_stage_pretrain: model classification head does not match the "
        "FGVC class count");
  }

  for (int step = 0; step < s2.steps; ++step) {
    const bool is_fgvc = slots[size_t(step)] && !fgvc_images.empty();
    Var loss;
    std::string label;
    if (is_fgvc) {
      const FgvcPairBatch pairs = sample_fgvc_pairs(
          fgvc_images, opt.fgvc_pairs_per_step, opt.p_same, rng);
      FgvcLosses fl = loss_fgvc(model, fgvc_images, pairs, class_index,
                                opt.tau_con, rng, true);
      loss = fl.total;
      label = "fgvc";
    } else {
      const Task task = idc_tasks[size_t(step)];
      std::vector<const Triplet*> batch;
      std::vector<const NegativeSet*> negs;
      std::vector<Triplet> staged(size_t(s2.batch_size));
      size_t slot = 0;
      for (size_t idx : idc_sampler.next(size_t(s2.batch_size))) {
        if (s2.augment) {
          staged[slot] = augment_triplet(idc_train[idx], s2.augment_noise,
                                         rng);
          batch.push_back(&staged[slot++]);
        } else {
          batch.push_back(&idc_train[idx]);
        }
        negs.push_back(task == Task::kFda ? &idc_negatives[idx] : nullptr);
      }
      loss = pretrain_task_loss(model, task, batch, negs, vocab, s2.tau1,
                                s2.tau2, rng, true);
      label = "idc:" + task_name(task);
    }
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
      throw std::runtime_error("two_stage_pretrain: non-finite loss at step " +
                               std::to_string(step));
    }
    nn::backward(loss);
    model.exclude_pad_from_updates();
    const double lr = warmup_lr(s2.lr, s2.warmup_steps, step);
    adam.step(model.params(), lr);
    if (step % std::max(1, s2.log_every) == 0) {
      log << step << "," << label << "," << std::setprecision(17) << value
          << "," << lr << "\n";
    }
  }
  save_checkpoint(result.checkpoint_path, model, vocab, s2.steps, &adam);
  return result;
}

}  // namespace idc
