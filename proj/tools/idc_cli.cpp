// Command-line front end: synthetic data generation, negative construction,
// pre-training, fine-tuning, generation, metric evaluation, and attention
// inspection over one run-config file.

#include "CLI11.hpp"

#include "idc/adaptation.hpp"
#include "idc/metrics.hpp"
#include "idc/model.hpp"
#include "idc/negatives.hpp"
#include "idc/objectives.hpp"
#include "idc/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

namespace {

using namespace idc;

struct Common {
  std::string config_path;
  std::string dataset;
  std::string out;
  std::string checkpoint;
  uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_config(const Common& c) {
  RunConfig rc;
  if (!c.config_path.empty()) rc = RunConfig::load(c.config_path);
  if (c.seed_set) rc.seed = c.seed;
  return rc;
}

Vocabulary vocab_from_triplets(const std::vector<Triplet>& triplets,
                               int min_freq) {
  std::vector<std::string> texts;
  for (const auto& t : triplets) texts.push_back(t.caption.text);
  return Vocabulary::build(texts, min_freq);
}

void tokenize_all(std::vector<Triplet>& triplets, const Vocabulary& vocab) {
  for (auto& t : triplets) assign_token_ids(t.caption, vocab);
}

std::vector<NegativeSet> build_all_negatives(
    const std::vector<Triplet>& triplets, const RunConfig& rc,
    uint64_t seed) {
  std::vector<std::string> texts;
  std::vector<Caption> captions;
  for (const auto& t : triplets) {
    texts.push_back(t.caption.text);
    captions.push_back(t.caption);
  }
  const TfidfIndex idx = build_tfidf_index(texts);
  const PosVocabularies vocabs =
      build_pos_vocabularies(captions, rc.pos_df_min);
  std::mt19937_64 rng(seed);
  std::vector<NegativeSet> out;
  for (size_t i = 0; i < triplets.size(); ++i) {
    const bool pseudo =
        triplets[i].is_pseudo || triplets[i].img2.all_zero();
    out.push_back(build_negative_set(captions[i], int(i), captions, idx,
                                     vocabs, rc.negative_ratio(), !pseudo,
                                     rng));
  }
  return out;
}

int cmd_synth_data(const Common& c) {
  const RunConfig rc = load_config(c);
  if (c.out.empty()) throw std::runtime_error("synth-data needs --out DIR");
  std::filesystem::create_directories(c.out);
  const SyntheticDataset ds =
      generate_synthetic_dataset(rc.synth_config(), rc.seed);
  write_triplets(c.out + "/train.jsonl", ds.train, ds.grid, ds.dim);
  write_triplets(c.out + "/val.jsonl", ds.val, ds.grid, ds.dim);
  write_triplets(c.out + "/test.jsonl", ds.test, ds.grid, ds.dim);
  std::cout << "wrote " << ds.train.size() << " train / " << ds.val.size()
            << " val / " << ds.test.size() << " test triplets to " << c.out
            << "\n";
  return 0;
}

int cmd_build_negatives(const Common& c, const std::string& vocab_out) {
  const RunConfig rc = load_config(c);
  if (c.dataset.empty() || c.out.empty()) {
    throw std::runtime_error("build-negatives needs --dataset and --out");
  }
  std::vector<Triplet> triplets = load_triplets(c.dataset);
  const auto sets = build_all_negatives(triplets, rc, rc.seed);
  write_negatives_jsonl(c.out, sets);
  if (!vocab_out.empty()) {
    std::vector<Caption> captions;
    for (const auto& t : triplets) captions.push_back(t.caption);
    write_pos_vocabularies_json(
        vocab_out, build_pos_vocabularies(captions, rc.pos_df_min));
  }
  std::cout << "wrote " << sets.size() << " negative sets to " << c.out
            << "\n";
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& negatives_path,
                 int steps_override) {
  RunConfig rc = load_config(c);
  if (steps_override >= 0) rc.pretrain_steps = steps_override;
  const std::string train_path =
      !c.dataset.empty() ? c.dataset : rc.train_path;
  if (train_path.empty() || c.out.empty()) {
    throw std::runtime_error("pretrain needs --dataset and --out");
  }
  std::vector<Triplet> train = load_triplets(train_path);
  const Vocabulary vocab = vocab_from_triplets(train, rc.min_word_freq);
  tokenize_all(train, vocab);
  Model model(rc.model_config(vocab.size()), rc.seed);
  std::vector<NegativeSet> negatives;
  if (rc.task_ratio_fda > 0) {
    const std::string npath =
        !negatives_path.empty() ? negatives_path : rc.negatives_path;
    negatives = npath.empty() ? build_all_negatives(train, rc, rc.seed)
                              : load_negatives_jsonl(npath);
  }
  const PretrainResult r =
      pretrain(model, train, negatives, vocab, rc.pretrain_options(c.out));
  std::cout << "pretrained " << r.steps_done << " steps; checkpoint at "
            << r.checkpoint_path << "\n";
  return 0;
}

int cmd_finetune(const Common& c, const std::string& val_path) {
  RunConfig rc = load_config(c);
  const std::string train_path =
      !c.dataset.empty() ? c.dataset : rc.train_path;
  if (train_path.empty() || c.out.empty()) {
    throw std::runtime_error("finetune needs --dataset and --out");
  }
  std::vector<Triplet> train = load_triplets(train_path);
  std::vector<Triplet> val;
  const std::string vpath = !val_path.empty() ? val_path : rc.val_path;
  if (!vpath.empty()) val = load_triplets(vpath);

  Vocabulary vocab;
  std::unique_ptr<Model> model;
  if (!c.checkpoint.empty()) {
    model = std::make_unique<Model>(
        load_checkpoint(c.checkpoint, &vocab, nullptr, nullptr));
  } else {
    vocab = vocab_from_triplets(train, rc.min_word_freq);
    model = std::make_unique<Model>(rc.model_config(vocab.size()), rc.seed);
  }
  tokenize_all(train, vocab);
  tokenize_all(val, vocab);
  const FinetuneResult r =
      finetune(*model, train, val, vocab, rc.finetune_config(c.out));
  std::cout << "finetuned; best " << rc.main_metric << " = " << r.best_metric
            << "; best checkpoint at " << r.best_checkpoint << "\n";
  return 0;
}

int cmd_generate(const Common& c, int max_len_override) {
  RunConfig rc = load_config(c);
  if (c.checkpoint.empty() || c.dataset.empty() || c.out.empty()) {
    throw std::runtime_error(
        "generate needs --checkpoint, --dataset and --out");
  }
  Vocabulary vocab;
  Model model = load_checkpoint(c.checkpoint, &vocab);
  std::vector<Triplet> split = load_triplets(c.dataset);
  tokenize_all(split, vocab);
  const int max_len =
      max_len_override >= 0 ? max_len_override : rc.max_gen_len;
  const auto items = generate_eval_items(model, split, vocab, max_len);
  write_generation_jsonl(c.out, items);
  std::cout << "wrote " << items.size() << " hypotheses to " << c.out << "\n";
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& metric) {
  if (c.dataset.empty()) {
    throw std::runtime_error("evaluate needs --dataset (generation JSONL)");
  }
  const auto items = load_generation_jsonl(c.dataset);
  const MetricsReport report = evaluate_all(items);
  std::cout << report_table(report);
  if (!metric.empty()) {
    std::cout << "main metric (" << metric
              << ") = " << caption_metric(metric, items) << "\n";
  }
  if (!c.out.empty()) {
    std::ofstream out(c.out);
    if (!out) throw std::runtime_error("cannot write " + c.out);
    out << report_json(report) << "\n";
  }
  return 0;
}

int cmd_inspect_attention(const Common& c, int index, int layer, int head,
                          int query, int image_slot) {
  if (c.checkpoint.empty() || c.dataset.empty() || c.out.empty()) {
    throw std::runtime_error(
        "inspect-attention needs --checkpoint, --dataset and --out");
  }
  Vocabulary vocab;
  Model model = load_checkpoint(c.checkpoint, &vocab);
  std::vector<Triplet> split = load_triplets(c.dataset);
  tokenize_all(split, vocab);
  if (index < 0 || size_t(index) >= split.size()) {
    throw std::runtime_error("inspect-attention: --index out of range");
  }
  const Triplet& t = split[size_t(index)];
  std::mt19937_64 rng(0);
  std::optional<int> padded;
  if (t.is_pseudo || t.img2.all_zero()) padded = 2;
  auto [v1, v2] = model.encode_images(t.img1, t.img2, padded, rng, false);
  const std::vector<int> framed = tokenize(t.caption.text, vocab);
  nn::Var text = model.embed_text(framed, rng, false);
  const AttentionMask mask =
      build_attention_mask(MaskMode::kPretrainBidir, model.config().cells(),
                           int(framed.size()), padded);
  EncoderOutput out = model.cross_encode(v1, v2, text, mask, rng, false);
  const int query_abs = mask.text_offset() + query;
  const nn::Matrix grid = export_attention(out, layer, head, query_abs,
                                           image_slot,
                                           model.config().grid_size);
  write_heatmap_csv(c.out, grid);
  std::cout << "wrote " << model.config().grid_size << "x"
            << model.config().grid_size << " heatmap to " << c.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"image difference captioning: pretrain-finetune pipeline"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "run config JSON");
    sub->add_option("--dataset", common.dataset, "input dataset path");
    sub->add_option("--out", common.out, "output path or directory");
    sub->add_option("--checkpoint", common.checkpoint, "model checkpoint");
    sub->add_option("--seed", common.seed, "random seed override")
        ->each([&common](const std::string&) { common.seed_set = true; });
  };

  auto* synth = app.add_subcommand("synth-data", "generate synthetic triplets");
  add_common(synth);

  std::string vocab_out;
  auto* negs = app.add_subcommand("build-negatives",
                                  "construct hard negative captions");
  add_common(negs);
  negs->add_option("--vocab-out", vocab_out, "write POS vocabularies JSON");

  std::string negatives_path;
  int steps_override = -1;
  auto* pre = app.add_subcommand("pretrain", "run the pre-training tasks");
  add_common(pre);
  pre->add_option("--negatives", negatives_path, "negatives sidecar JSONL");
  pre->add_option("--steps", steps_override, "override pretrain steps");

  std::string val_path;
  auto* fin = app.add_subcommand("finetune", "caption fine-tuning");
  add_common(fin);
  fin->add_option("--val", val_path, "validation dataset for early stopping");

  int max_len_override = -1;
  auto* gen = app.add_subcommand("generate", "greedy caption generation");
  add_common(gen);
  gen->add_option("--max-len", max_len_override, "maximum caption length");

  std::string metric;
  auto* eva = app.add_subcommand("evaluate", "score a generation file");
  add_common(eva);
  eva->add_option("--metric", metric, "also print one main metric");

  int index = 0, layer = 0, head = 0, query = 0, image_slot = 1;
  auto* att = app.add_subcommand("inspect-attention",
                                 "export a text-to-image attention heatmap");
  add_common(att);
  att->add_option("--index", index, "triplet index in the dataset");
  att->add_option("--layer", layer, "cross-modal layer");
  att->add_option("--head", head, "attention head");
  att->add_option("--query", query, "text-segment query position (0 = [CLS])");
  att->add_option("--image", image_slot, "image slot 1|2");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth_data(common);
    if (negs->parsed()) return cmd_build_negatives(common, vocab_out);
    if (pre->parsed()) return cmd_pretrain(common, negatives_path,
                                           steps_override);
    if (fin->parsed()) return cmd_finetune(common, val_path);
    if (gen->parsed()) return cmd_generate(common, max_len_override);
    if (eva->parsed()) return cmd_evaluate(common, metric);
    if (att->parsed()) {
      return cmd_inspect_attention(common, index, layer, head, query,
                                   image_slot);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
