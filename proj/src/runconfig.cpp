#include "idc/runconfig.hpp"

#include "json.hpp"

#include <fstream>
#include <set>

namespace idc {

using json = nlohmann::json;

namespace {

template <typename T>
void read_key(const json& j, const std::string& key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error(path + ": not a JSON object");

  static const std::set<std::string> kKnown = {
      "version", "seed",
      "hidden", "ffn_hidden", "heads", "cross_layers", "se_blocks",
      "pe_blocks", "dropout", "max_sent_len", "grid_size", "feature_dim",
      "tie_mlm_head", "distractor_uses_pair",
      "min_word_freq",
      "tau1", "tau2", "tau_con", "task_ratio_mlm", "task_ratio_mvcl",
      "task_ratio_fda", "schedule_draw_mode",
      "pretrain_steps", "warmup_steps", "pretrain_lr", "weight_decay",
      "batch_size", "log_every", "checkpoint_every", "augment", "augment_noise",
      "finetune_steps", "finetune_warmup_steps", "finetune_lr",
      "finetune_weight_decay", "finetune_batch_size", "lambda_distractor",
      "main_metric", "patience", "eval_every", "max_gen_len",
      "neg_retrieve", "neg_replace", "neg_confuse", "pos_df_min",
      "synth_train_total", "synth_val_total", "synth_test_total",
      "objects_min", "objects_max", "render_noise", "jitter_amplitude",
      "fgvc_ratio", "idc_ratio", "p_same", "fgvc_pairs_per_step",
      "train_path", "val_path", "test_path", "negatives_path", "gic_path",
      "fgvc_path",
  };
  for (const auto& [key, value] : j.items()) {
    if (!kKnown.count(key)) {
      throw std::runtime_error(path + ": unknown config key '" + key + "'");
    }
  }

  RunConfig c;
  read_key(j, "version", c.version);
  if (c.version != 1) {
    throw std::runtime_error(path + ": unsupported config version " +
                             std::to_string(c.version));
  }
  read_key(j, "seed", c.seed);
  read_key(j, "hidden", c.hidden);
  read_key(j, "ffn_hidden", c.ffn_hidden);
  read_key(j, "heads", c.heads);
  read_key(j, "cross_layers", c.cross_layers);
  read_key(j, "se_blocks", c.se_blocks);
  read_key(j, "pe_blocks", c.pe_blocks);
  read_key(j, "dropout", c.dropout);
  read_key(j, "max_sent_len", c.max_sent_len);
  read_key(j, "grid_size", c.grid_size);
  read_key(j, "feature_dim", c.feature_dim);
  read_key(j, "tie_mlm_head", c.tie_mlm_head);
  read_key(j, "distractor_uses_pair", c.distractor_uses_pair);
  read_key(j, "min_word_freq", c.min_word_freq);
  read_key(j, "tau1", c.tau1);
  read_key(j, "tau2", c.tau2);
  read_key(j, "tau_con", c.tau_con);
  read_key(j, "task_ratio_mlm", c.task_ratio_mlm);
  read_key(j, "task_ratio_mvcl", c.task_ratio_mvcl);
  read_key(j, "task_ratio_fda", c.task_ratio_fda);
  read_key(j, "schedule_draw_mode", c.schedule_draw_mode);
  read_key(j, "pretrain_steps", c.pretrain_steps);
  read_key(j, "warmup_steps", c.warmup_steps);
  read_key(j, "pretrain_lr", c.pretrain_lr);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "log_every", c.log_every);
  read_key(j, "checkpoint_every", c.checkpoint_every);
  read_key(j, "augment", c.augment);
  read_key(j, "augment_noise", c.augment_noise);
  read_key(j, "finetune_steps", c.finetune_steps);
  read_key(j, "finetune_warmup_steps", c.finetune_warmup_steps);
  read_key(j, "finetune_lr", c.finetune_lr);
  read_key(j, "finetune_weight_decay", c.finetune_weight_decay);
  read_key(j, "finetune_batch_size", c.finetune_batch_size);
  read_key(j, "lambda_distractor", c.lambda_distractor);
  read_key(j, "main_metric", c.main_metric);
  read_key(j, "patience", c.patience);
  read_key(j, "eval_every", c.eval_every);
  read_key(j, "max_gen_len", c.max_gen_len);
  read_key(j, "neg_retrieve", c.neg_retrieve);
  read_key(j, "neg_replace", c.neg_replace);
  read_key(j, "neg_confuse", c.neg_confuse);
  read_key(j, "pos_df_min", c.pos_df_min);
  read_key(j, "synth_train_total", c.synth_train_total);
  read_key(j, "synth_val_total", c.synth_val_total);
  read_key(j, "synth_test_total", c.synth_test_total);
  read_key(j, "objects_min", c.objects_min);
  read_key(j, "objects_max", c.objects_max);
  read_key(j, "render_noise", c.render_noise);
  read_key(j, "jitter_amplitude", c.jitter_amplitude);
  read_key(j, "fgvc_ratio", c.fgvc_ratio);
  read_key(j, "idc_ratio", c.idc_ratio);
  read_key(j, "p_same", c.p_same);
  read_key(j, "fgvc_pairs_per_step", c.fgvc_pairs_per_step);
  read_key(j, "train_path", c.train_path);
  read_key(j, "val_path", c.val_path);
  read_key(j, "test_path", c.test_path);
  read_key(j, "negatives_path", c.negatives_path);
  read_key(j, "gic_path", c.gic_path);
  read_key(j, "fgvc_path", c.fgvc_path);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  // Structural constraints are rechecked by ModelConfig::validate once the
  // vocabulary size is known; these are the config-level ones.
  if (hidden < 1 || hidden % heads != 0) {
    throw std::runtime_error("config: hidden must be positive and divide by heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::runtime_error("config: dropout must be in [0,1)");
  }
  if (task_ratio_mlm < 0 || task_ratio_mvcl < 0 || task_ratio_fda < 0) {
    throw std::runtime_error("config: task ratios must be nonnegative");
  }
  if (main_metric != "cider" && main_metric != "rouge_l") {
    throw std::runtime_error("config: main_metric must be cider or rouge_l");
  }
  if (batch_size < 1 || finetune_batch_size < 1) {
    throw std::runtime_error("config: batch sizes must be >= 1");
  }
  if (pretrain_steps < 0 || finetune_steps < 0) {
    throw std::runtime_error("config: step counts must be >= 0");
  }
  if (neg_retrieve < 0 || neg_replace < 0 || neg_confuse < 0 ||
      neg_retrieve + neg_replace + neg_confuse < 1) {
    throw std::runtime_error("config: negative ratio must sum to >= 1");
  }
  if (p_same < 0.0 || p_same > 1.0) {
    throw std::runtime_error("config: p_same must be in [0,1]");
  }
}

ModelConfig RunConfig::model_config(int vocab_size, int num_classes) const {
  ModelConfig m;
  m.hidden = hidden;
  m.ffn_hidden = ffn_hidden;
  m.heads = heads;
  m.cross_layers = cross_layers;
  m.se_blocks = se_blocks;
  m.pe_blocks = pe_blocks;
  m.dropout = dropout;
  m.max_sent_len = max_sent_len;
  m.vocab_size = vocab_size;
  m.visual_dim = feature_dim;
  m.grid_size = grid_size;
  m.tie_mlm_head = tie_mlm_head;
  m.num_classes = num_classes;
  m.distractor_uses_pair = distractor_uses_pair;
  m.validate();
  return m;
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig s;
  s.grid = grid_size;
  s.feature_dim = feature_dim;
  s.train_counts = spread_counts(synth_train_total);
  s.val_counts = spread_counts(synth_val_total);
  s.test_counts = spread_counts(synth_test_total);
  s.objects_min = objects_min;
  s.objects_max = objects_max;
  s.render_noise = render_noise;
  s.jitter_amplitude = jitter_amplitude;
  return s;
}

TaskSchedule RunConfig::task_schedule() const {
  TaskSchedule t;
  t.mlm = task_ratio_mlm;
  t.mvcl = task_ratio_mvcl;
  t.fda = task_ratio_fda;
  t.draw_mode = schedule_draw_mode;
  t.seed = seed;
  return t;
}

PretrainOptions RunConfig::pretrain_options(const std::string& out_dir) const {
  PretrainOptions p;
  p.steps = pretrain_steps;
  p.batch_size = batch_size;
  p.lr = pretrain_lr;
  p.warmup_steps = warmup_steps;
  p.weight_decay = weight_decay;
  p.schedule = task_schedule();
  p.tau1 = tau1;
  p.tau2 = tau2;
  p.log_every = log_every;
  p.seed = seed;
  p.out_dir = out_dir;
  p.checkpoint_every = checkpoint_every;
  p.augment = augment;
  p.augment_noise = augment_noise;
  return p;
}

FinetuneConfig RunConfig::finetune_config(const std::string& out_dir) const {
  FinetuneConfig f;
  f.steps = finetune_steps;
  f.batch_size = finetune_batch_size;
  f.lr = finetune_lr;
  f.warmup_steps = finetune_warmup_steps;
  f.weight_decay = finetune_weight_decay;
  f.lambda_distractor = lambda_distractor;
  f.main_metric = main_metric;
  f.patience = patience;
  f.eval_every = eval_every;
  f.max_gen_len = max_gen_len;
  f.log_every = log_every;
  f.seed = seed;
  f.out_dir = out_dir;
  f.augment = augment;
  f.augment_noise = augment_noise;
  return f;
}

NegativeRatio RunConfig::negative_ratio() const {
  return {neg_retrieve, neg_replace, neg_confuse};
}

}  // namespace idc
