#pragma once

#include "idc/adaptation.hpp"
#include "idc/corpus.hpp"
#include "idc/model.hpp"
#include "idc/negatives.hpp"
#include "idc/objectives.hpp"

#include <optional>
#include <string>

namespace idc {

// Flat run configuration: JSON file with a schema version; unknown keys are
// rejected. Command-line flags override file values.
struct RunConfig {
  int version = 1;
  uint64_t seed = 1234;

  // model
  int hidden = 64;
  int ffn_hidden = 128;
  int heads = 4;
  int cross_layers = 2;
  int se_blocks = 1;
  int pe_blocks = 1;
  double dropout = 0.2;
  int max_sent_len = 40;
  int grid_size = 4;
  int feature_dim = 32;
  bool tie_mlm_head = false;
  bool distractor_uses_pair = false;

  // vocabulary
  int min_word_freq = 1;

  // objectives
  double tau1 = 1.0;
  double tau2 = 1.0;
  double tau_con = 1.0;
  int task_ratio_mlm = 8;
  int task_ratio_mvcl = 1;
  int task_ratio_fda = 2;
  bool schedule_draw_mode = false;

  // pre-training
  int pretrain_steps = 2000;
  int warmup_steps = 200;
  double pretrain_lr = 1e-4;
  double weight_decay = 0.0;
  int batch_size = 16;
  int log_every = 1;
  int checkpoint_every = 0;
  bool augment = false;
  double augment_noise = 0.01;

  // fine-tuning
  int finetune_steps = 1000;
  int finetune_warmup_steps = 0;
  double finetune_lr = 3e-5;
  double finetune_weight_decay = 0.0;
  int finetune_batch_size = 16;
  double lambda_distractor = 1.0;
  std::string main_metric = "cider";
  int patience = 5;
  int eval_every = 100;
  int max_gen_len = 20;

  // negative construction
  int neg_retrieve = 2;
  int neg_replace = 2;
  int neg_confuse = 2;
  int pos_df_min = 2;

  // synthetic data
  int synth_train_total = 200;
  int synth_val_total = 50;
  int synth_test_total = 50;
  int objects_min = 2;
  int objects_max = 4;
  double render_noise = 0.01;
  double jitter_amplitude = 0.05;

  // cross-task expansion
  int fgvc_ratio = 1;
  int idc_ratio = 4;
  double p_same = 0.5;
  int fgvc_pairs_per_step = 16;

  // data paths (flags usually override)
  std::string train_path, val_path, test_path;
  std::string negatives_path, gic_path, fgvc_path;

  static RunConfig load(const std::string& path);
  void validate() const;

  ModelConfig model_config(int vocab_size, int num_classes = 0) const;
  SynthConfig synth_config() const;
  TaskSchedule task_schedule() const;
  PretrainOptions pretrain_options(const std::string& out_dir) const;
  FinetuneConfig finetune_config(const std::string& out_dir) const;
  NegativeRatio negative_ratio() const;
};

}  // namespace idc
