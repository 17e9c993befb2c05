#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsskd/data.hpp"
#include "lsskd/distill.hpp"
#include "lsskd/network.hpp"
#include "lsskd/sstask.hpp"

namespace lsskd {

struct TrainConfig {
    std::uint32_t epochs = 240;
    std::size_t batch_size = 64;
    double lr0 = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    std::vector<std::uint32_t> milestones = {150, 210};
    double decay_factor = 0.1;
    std::uint64_t seed = 1;
    double fewshot_fraction = 1.0;
    Hyperparams hp;
    bool baseline_mode = false; // hard-label cross-entropy only, no auxiliary training
    std::string out_dir = "out";

    void validate() const;
};

struct EpochMetrics {
    std::uint32_t epoch = 0;
    double lr = 0.0;
    double train_total = 0.0;
    double ls_loss = 0.0;
    double is_loss = 0.0;
    double test_top1 = 0.0;
    double test_top5 = 0.0;
    double wall_s = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

/// lr0 * decay^(milestones completed before `epoch`).
double lr_at(std::uint32_t epoch, const TrainConfig& cfg);

/// v <- momentum*v + grad + wd*param; param <- param - lr*v.
/// Weight decay skips parameters flagged decay=false (norm scales/shifts).
/// Parameters without a gradient this step are left untouched.
void sgd_step(std::vector<ParamPtr>& params, double lr, double momentum, double weight_decay);

/// Constant target tensor [B, dim] from per-sample soft targets.
Tensor targets_to_tensor(const std::vector<SoftTarget>& targets, std::size_t dim, DType dt);

// ---- one training step, reusable by the gradient checker -----------------------

struct StepBatch {
    Tensor main_input;                            // [B,C,H,W]
    Tensor aux_input;                             // [M*B,C,H,W]
    Tensor final_targets;                         // [B,N]
    std::vector<std::vector<Tensor>> sad_targets; // [L][M], each [B,K]
    std::vector<std::int64_t> sample_ids;
    std::size_t softened_final = 0; // rows built from a previous-epoch record
};

struct LossParts {
    Tensor ce_resp, ce_hier, div_sad, feat, total;
    Tensor final_logits;            // [B,N]
    std::vector<Tensor> sad_logits; // [L] of [M*B,K]
    Tensor final_pooled;            // raw F^o, [M*B,d]
};

/// Frozen deep-side values for finite-difference checks: the loss treats these
/// as the detached constants instead of detaching the live forward pass.
struct DeepConstants {
    std::vector<Tensor> deep_sad; // [M] of [B,K]
    Tensor final_pooled;          // [M*B,d]
};

/// Builds inputs and soft targets for the given samples (already augmented).
StepBatch build_step_batch(const std::vector<ImageSample>& batch, const DatasetMeta& meta,
                           const JointLabelSpace& space, const PredictionStore& store,
                           std::uint32_t epoch, double alpha, const Hyperparams& hp, DType dt);

/// Full LSSKD forward: both network passes plus the four loss terms and L_T.
LossParts compute_losses(StudentNetwork& net, const StepBatch& batch, const Hyperparams& hp,
                         bool training, const DeepConstants* frozen_deep = nullptr);

/// Top-1/top-5 percentages over the test set; final N-way head only.
std::pair<double, double> evaluate(StudentNetwork& net, const Dataset& test,
                                   std::size_t batch_size);

/// Rank of the true label under (value desc, index asc); used by evaluate().
bool label_in_top_k(const std::vector<double>& logits, int label, int k);

struct TrainResult {
    std::vector<EpochMetrics> metrics; // epochs executed by this call
    std::vector<std::size_t> softened_final_per_epoch;
    std::string metrics_path, last_checkpoint_path, best_checkpoint_path, store_path;
    double best_top1 = 0.0;
};

/// End-to-end loop: per epoch shuffles batches, augments, expands transforms,
/// softens targets from the previous epoch's store, steps SGD, evaluates,
/// appends a CSV row and writes checkpoint + store. Resumable from the
/// (checkpoint, store) pair written after any epoch.
TrainResult run_training(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                         StudentNetwork& net, const std::string& resume_checkpoint = "");

} // namespace lsskd
