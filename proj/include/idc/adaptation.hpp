#pragma once

#include "idc/metrics.hpp"
#include "idc/model.hpp"
#include "idc/objectives.hpp"

#include <random>
#include <string>
#include <vector>

namespace idc {

struct FinetuneConfig {
  int steps = 1000;
  int batch_size = 16;
  double lr = 3e-5;
  int warmup_steps = 0;
  double weight_decay = 0.0;
  double lambda_distractor = 1.0;
  std::string main_metric = "cider";  // or "rouge_l"
  int patience = 5;
  int eval_every = 100;  // 0 disables validation/early-stop
  int max_gen_len = 20;
  int log_every = 1;
  uint64_t seed = 1234;
  std::string out_dir;
  bool augment = false;  // cell-permutation + noise on training batches
  double augment_noise = 0.01;

  void validate() const;
};

struct FinetuneStepLoss {
  nn::Var caption;
  nn::Var distractor;  // undefined when lambda = 0
  nn::Var total;
};

// Teacher-forced next-token caption loss under the causal query mask, plus
// the weighted distractor-judging BCE. Each query position predicts its own
// token from strictly-previous tokens and the full visual context.
FinetuneStepLoss finetune_step_loss(Model& model,
                                    const std::vector<const Triplet*>& batch,
                                    double lambda_distractor,
                                    std::mt19937_64& rng, bool training);

// Distractor-head probability for one pair (inference path).
double distractor_probability(Model& model, const Triplet& t);

// Word-by-word argmax decoding from the [MASK]-position likelihoods; stops
// at [EOS] or max_len words. Deterministic, consumes no reference tokens.
std::string greedy_generate(Model& model, const FeatureGrid& img1,
                            const FeatureGrid& img2, const Vocabulary& vocab,
                            int max_len);

// Zero-pads the missing image to adapt a caption pair to triplet form.
Triplet make_pseudo_triplet(const FeatureGrid& img, const Caption& caption);

// --- FGVC pair training ---

struct FgvcPair {
  int a = 0, b = 0;  // indices into the image list
  bool same_class = false;
};
struct FgvcPairBatch {
  std::vector<FgvcPair> pairs;
};

// Exactly round(p_same * n) same-class pairs, uniform over eligible ordered
// combinations; an image is never paired with itself.
FgvcPairBatch sample_fgvc_pairs(const std::vector<ClassifiedImage>& images,
                                int n, double p_same, std::mt19937_64& rng);

// Sorted unique label -> class id map; the model's classification head
// width must match its size.
std::map<std::string, int> build_class_index(
    const std::vector<ClassifiedImage>& images);

struct FgvcLosses {
  nn::Var cls, con, mtc, total;
};

// Classification + supervised-contrastive losses on the single-image
// encoder's [IMG] outputs, and the same-class matching BCE on the
// pair-encoder outputs.
FgvcLosses loss_fgvc(Model& model, const std::vector<ClassifiedImage>& images,
                     const FgvcPairBatch& batch,
                     const std::map<std::string, int>& class_index,
                     double tau_con, std::mt19937_64& rng, bool training);

// --- fine-tuning driver ---

struct FinetuneResult {
  std::string final_checkpoint;
  std::string best_checkpoint;
  double best_metric = 0.0;
  int best_eval = -1;
  std::vector<double> metric_history;
  std::string log_path;
};

double caption_metric(const std::string& name,
                      const std::vector<EvalItem>& items);

// Generates greedily over a split and scores it against the gold captions.
std::vector<EvalItem> generate_eval_items(Model& model,
                                          const std::vector<Triplet>& split,
                                          const Vocabulary& vocab,
                                          int max_len);

FinetuneResult finetune(Model& model, const std::vector<Triplet>& train,
                        const std::vector<Triplet>& val,
                        const Vocabulary& vocab, const FinetuneConfig& cfg);

// --- early stopping ---

// True when the metric history has gone `patience` consecutive evaluations
// without improving on the best seen.
bool should_stop(const std::vector<double>& history, int patience);
int best_metric_index(const std::vector<double>& history);

// --- two-stage pre-training with cross-task data ---

struct TwoStageOptions {
  PretrainOptions stage1;  // GIC pseudo-triplets
  PretrainOptions stage2;  // FGVC + IDC interleave
  int fgvc_ratio = 1;      // FGVC : IDC batch ratio in stage 2
  int idc_ratio = 4;
  double tau_con = 1.0;
  int fgvc_pairs_per_step = 16;
  double p_same = 0.5;
};

struct TwoStageResult {
  std::string checkpoint_path;
  std::string stage1_log;
  std::string stage2_log;
};

TwoStageResult two_stage_pretrain(
    Model& model, const std::vector<Triplet>& gic_pseudo,
    const std::vector<NegativeSet>& gic_negatives,
    const std::vector<ClassifiedImage>& fgvc_images,
    const std::vector<Triplet>& idc_train,
    const std::vector<NegativeSet>& idc_negatives, const Vocabulary& vocab,
    const TwoStageOptions& opt);

// Deterministic a:b interleave (largest remainder, a-side first).
std::vector<bool> interleave_pattern(int a, int b, int steps);

}  // namespace idc
