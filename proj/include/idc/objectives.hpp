#pragma once

#include "idc/model.hpp"
#include "idc/negatives.hpp"

#include <random>
#include <string>
#include <vector>

namespace idc {

// --- masking policies ---

struct MaskedText {
  std::vector<int> input;            // framed ids with corruptions applied
  std::vector<int> masked_positions; // indices into input
  std::vector<int> targets;          // original ids, parallel to positions
};

// 15% of the ordinary words (nearest integer, minimum one) get the 80/10/10
// [MASK]/random/unchanged corruption. Frame specials are never touched.
// Throws when the caption has no ordinary word.
MaskedText mask_text(const std::vector<int>& framed, const Vocabulary& vocab,
                     std::mt19937_64& rng);

struct MaskedVisual {
  FeatureGrid img1, img2;          // corrupted copies
  int masked_image = 1;
  std::vector<int> masked_cells;   // cell indices within the masked image
  nn::Matrix originals;            // k x D_v target rows
};

// Zeroes 15% of one image's cells (nearest integer, minimum one). The image
// is drawn uniformly unless img2 is a zero-padded pseudo image, in which
// case only the real image is eligible.
MaskedVisual mask_visual(const FeatureGrid& img1, const FeatureGrid& img2,
                         bool img2_padded, std::mt19937_64& rng);

// --- training-time augmentation ---

// Applies one shared random cell permutation to both images plus small
// additive noise. Captions never reference absolute grid positions, so the
// result describes the same difference; the permutation removes the
// position-keyed shortcut that lets a desk-scale model memorize pairs.
Triplet augment_triplet(const Triplet& t, double noise_amplitude,
                        std::mt19937_64& rng);

// --- pre-training losses ---

struct MlmInstance {
  const Triplet* triplet = nullptr;
  MaskedText masked;
};
std::vector<MlmInstance> build_mlm_batch(
    const std::vector<const Triplet*>& items, const Vocabulary& vocab,
    std::mt19937_64& rng);
// Mean cross-entropy over all masked positions in the batch, with full
// visual context under the bidirectional mask.
nn::Var loss_mlm(Model& model, const std::vector<MlmInstance>& batch,
                 std::mt19937_64& rng, bool training);

struct MvclInstance {
  const Triplet* triplet = nullptr;
  MaskedVisual masked;
};
std::vector<MvclInstance> build_mvcl_batch(
    const std::vector<const Triplet*>& items, std::mt19937_64& rng);
// Per-masked-cell NCE against the batch's unmasked cells; anchors are the
// cross-encoder states at masked cells, targets are raw features mapped
// through the shared image projection. Throws on an empty negative pool.
nn::Var loss_mvcl(Model& model, const std::vector<MvclInstance>& batch,
                  double tau1, std::mt19937_64& rng, bool training);

struct FdaContrast {
  const Triplet* triplet = nullptr;
  std::vector<int> positive;               // framed ids
  std::vector<std::vector<int>> negatives; // framed ids per negative
};
FdaContrast build_fda_batch(const Triplet& triplet, const NegativeSet& negs,
                            const Vocabulary& vocab);
// NCE over cosine(global visual rep, caption rep) with the true caption as
// positive; every caption is encoded against the same per-step visual
// context. Throws when an instance has no negatives.
nn::Var loss_fda(Model& model, const std::vector<FdaContrast>& batch,
                 double tau2, std::mt19937_64& rng, bool training);

// --- schedule ---

enum class Task { kMlm, kMvcl, kFda };
const std::string& task_name(Task t);

struct TaskSchedule {
  int mlm = 8, mvcl = 1, fda = 2;
  bool draw_mode = false;  // seeded categorical draw instead of the pattern
  uint64_t seed = 1234;
};

// Pattern mode interleaves a fixed repeating block realizing the ratio
// exactly; draw mode samples i.i.d. from the ratio.
std::vector<Task> schedule_batches(const TaskSchedule& schedule, int steps);

// --- pre-training loop ---

struct PretrainOptions {
  int steps = 1000;
  int batch_size = 16;
  double lr = 1e-4;
  int warmup_steps = 0;
  double weight_decay = 0.0;
  TaskSchedule schedule;
  double tau1 = 1.0;
  double tau2 = 1.0;
  int log_every = 1;
  uint64_t seed = 1234;
  std::string out_dir;        // log + checkpoint location
  std::string source_tag;     // optional data-source prefix in the loss log
  int checkpoint_every = 0;   // 0 = final checkpoint only
  bool augment = false;       // cell-permutation + noise on training batches
  double augment_noise = 0.01;
};

struct PretrainResult {
  long steps_done = 0;
  std::string checkpoint_path;
  std::string log_path;
};

// One task step's loss over a batch (shared by pretrain and the two-stage
// schedule).
nn::Var pretrain_task_loss(Model& model, Task task,
                           const std::vector<const Triplet*>& batch,
                           const std::vector<const NegativeSet*>& negatives,
                           const Vocabulary& vocab, double tau1, double tau2,
                           std::mt19937_64& rng, bool training);

// Alternating-task Adam loop with linear warm-up to a constant peak rate.
// Writes a step,task,loss,lr CSV and a final checkpoint; aborts on
// non-finite loss.
PretrainResult pretrain(Model& model, const std::vector<Triplet>& train,
                        const std::vector<NegativeSet>& negatives,
                        const Vocabulary& vocab, const PretrainOptions& opt);

// Epoch-shuffling index iterator shared by the training loops.
class BatchSampler {
 public:
  BatchSampler(size_t n, uint64_t seed);
  std::vector<size_t> next(size_t batch_size);

 private:
  size_t n_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  std::mt19937_64 rng_;
  void reshuffle();
};

double warmup_lr(double peak, int warmup_steps, long step);

}  // namespace idc
