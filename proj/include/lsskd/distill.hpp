#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lsskd/tensor.hpp"

namespace lsskd {

struct Hyperparams {
    double alpha = 0.8;  // softening weight
    double beta = 0.1;   // KL weight
    double gamma = 0.1;  // feature weight
    double tau_ce = 1.0; // final-head temperature (fixed)
    double tau_kd = 3.0; // SAD softening / KL temperature
    bool alpha_warmup = false;

    void validate() const;
    /// alpha actually used at `epoch` (linear ramp to alpha when warmup is on).
    double alpha_at(std::uint32_t epoch, std::uint32_t total_epochs) const;
};

/// Normalized target vector plus where it came from.
struct SoftTarget {
    std::vector<double> probs;
    bool softened = false; // false: hard one-hot fallback (no previous record)
};

/// y_s = (1-alpha) * one_hot + alpha * softmax_t(prev_logits, tau), computed
/// in double. Without a previous record (epoch 1) the one-hot passes through.
SoftTarget soften_final(const std::vector<double>& one_hot,
                        const std::vector<double>* prev_logits, double alpha, double tau_ce);

/// Per (stage, transform) variant of the same rule over the K-dim joint space.
SoftTarget soften_sad(const std::vector<double>& joint_one_hot,
                      const std::vector<double>* prev_sad_logits, double alpha, double tau_kd);

// ---- loss terms ----------------------------------------------------------------
// All take per-(stage, transform) slices of shape [B, K]; targets are constant
// tensors of the same shape.

/// Batch-mean soft cross-entropy of the final head at tau_ce.
Tensor loss_ce_resp(const Tensor& final_logits, const Tensor& soft_targets, double tau_ce);

/// (1/M) * sum_j sum_l soft cross-entropy of stage l's SAD on transform j.
Tensor loss_ce_hier_sad(const std::vector<std::vector<Tensor>>& sad_logits,
                        const std::vector<std::vector<Tensor>>& soft_targets, double tau_kd);

/// (1/M) * sum_j sum_{l<L} tau^2 * KL(softmax_t(q_l) || softmax_t(q_deep)),
/// with the deep side detached by the caller.
Tensor loss_div_sad(const std::vector<std::vector<Tensor>>& shallow_sad_logits,
                    const std::vector<Tensor>& deep_sad_logits_detached, double tau_kd);

/// Mean over (stage, transformed sample) pairs of ||F_l - F_o||^2, F_o detached.
Tensor loss_feat(const std::vector<Tensor>& shallow_pooled, const Tensor& final_pooled_detached);

/// L_T = (1-beta) * ce_resp + ce_hier + beta * div + gamma * feat.
Tensor total_loss(const Tensor& ce_resp, const Tensor& ce_hier, const Tensor& div_sad,
                  const Tensor& feat, double beta, double gamma);

// ---- previous-epoch prediction store --------------------------------------------

/// Raw logits of one sample from one epoch: final head plus every
/// (stage, transform) SAD head. Temperature is applied at read time.
struct PredictionRecord {
    std::vector<float> final_logits;            // N
    std::vector<std::vector<float>> sad_logits; // [L*M] slots of K, index l*M+j
};

/// Holds epoch e-1 for reading and epoch e for writing; persists as an "LSPS"
/// file per epoch and is the resume companion of the checkpoint.
class PredictionStore {
public:
    PredictionStore() = default;
    PredictionStore(int n, int m, int l);

    int num_classes() const { return n_; }
    int num_transforms() const { return m_; }
    int num_stages() const { return l_; }
    std::uint32_t write_epoch() const { return write_epoch_; }

    /// Opens epoch e for writing; the previously written epoch becomes readable.
    void begin_epoch(std::uint32_t epoch);

    /// Records one sample's predictions for the epoch under construction.
    /// A second update for the same (epoch, sample) is an error.
    void update(std::int64_t sample_id, std::vector<float> final_logits,
                std::vector<std::vector<float>> sad_logits);

    /// Record from epoch `epoch`; only write_epoch()-1 is retained.
    const PredictionRecord* fetch(std::uint32_t epoch, std::int64_t sample_id) const;

    std::size_t read_size() const { return read_.size(); }
    std::size_t write_size() const { return write_.size(); }

    void save(const std::string& path) const; // persists the written epoch
    static PredictionStore load(const std::string& path);

private:
    int n_ = 0, m_ = 0, l_ = 0;
    std::uint32_t write_epoch_ = 0; // 0: nothing written yet
    std::unordered_map<std::int64_t, PredictionRecord> read_;  // epoch write_epoch_-1
    std::unordered_map<std::int64_t, PredictionRecord> write_; // epoch write_epoch_
};

} // namespace lsskd
