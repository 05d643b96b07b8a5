#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "hba/data.hpp"
#include "hba/model.hpp"

namespace hba {

struct TrainConfig {
    float lr_start = 0.0025f;
    float lr_decay = 0.985f;
    int decay_start_epoch = 150;
    int batch_size = 8;
    int max_epochs = 500;
    int early_stop_patience = 25; // on validation Dice loss
    float dice_smooth = 1.0f;
    std::uint64_t seed = 0;

    void validate() const;
    std::string serialize() const;
    static TrainConfig deserialize(const std::string& text);
};

// constant through decay_start_epoch, multiplicative decay afterwards
float lr_at(int epoch, const TrainConfig& cfg);

// Smoothed Dice loss over a batch of logits vs binary targets, mean over the
// class channels (thin wrapper over the fused differentiable op).
template <class Real>
TensorPtr<Real> dice_loss(const TensorPtr<Real>& logits, const TensorPtr<Real>& target, Real smooth);

// Adam moment buffers aligned with the learnable tensors of one model
struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<float>> m, v;
};

AdamState init_adam(const std::vector<NamedTensor<float>>& tensors);

// one adaptive-moment update (beta1 0.9, beta2 0.999, eps 1e-8, bias
// correction); missing gradients count as zero, non-finite gradients abort
// naming the parameter
void adam_step(std::vector<NamedTensor<float>>& tensors, AdamState& state, float lr);

struct EpochStats {
    int epoch = 0;
    float lr = 0;
    float train_loss = 0;
    float val_loss = 0;
};

struct FitResult {
    std::vector<EpochStats> history;
    int best_epoch = -1;
    float best_val = std::numeric_limits<float>::infinity();
};

// Resumable loop state. `best` snapshots the weights of the best epoch;
// `live` snapshots the weights as of the last completed epoch, which is
// where a resumed run continues from.
struct TrainState {
    int next_epoch = 0;
    int best_epoch = -1;
    float best_val = std::numeric_limits<float>::infinity();
    int epochs_since_improvement = 0;
    AdamState adam;
    ModelParams<float> best;
    ModelParams<float> live;
};

using StopFn = std::function<bool(const EpochStats&)>;

// Per-epoch: shuffled batches with on-the-fly augmentation, one Adam step
// per batch, validation Dice loss in eval mode, best-weights tracking and
// early stopping. On return the model holds the best-validation weights.
// A primed TrainState resumes and reproduces the uninterrupted trajectory.
FitResult fit(ModelParams<float>& model, const std::vector<TrainSample>& train,
              const std::vector<TrainSample>& val, const TrainConfig& cfg, StopFn stop = {},
              TrainState* state = nullptr);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

// optimizer-state sidecar (scalars, moments, best-weights blob)
void save_train_state(const std::string& path, const TrainState& state,
                      const NetworkConfig& model_cfg);
TrainState load_train_state(const std::string& path, const NetworkConfig& model_cfg);

} // namespace hba
