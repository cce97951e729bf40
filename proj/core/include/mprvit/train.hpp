#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mprvit/data.hpp"
#include "mprvit/model.hpp"
#include "mprvit/nn_ops.hpp"

namespace mprvit {

struct TrainConfig {
  float lr = 2e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  float eps = 1e-6f;
  float weight_decay = 1e-2f;
  int batch_size = 32;
  int max_epochs = 251;
  int patience = 20;
  float flip_prob = 0.5f;
  std::uint64_t seed = 0;

  void validate() const;
};

// Per-parameter first/second moment buffers, aligned with ParamTable order.
struct OptimizerState {
  std::vector<std::vector<float>> m, v;
  std::int64_t step = 0;

  void init_like(const ParamTable& params);
  bool initialized() const { return !m.empty(); }
};

// Decoupled-weight-decay update:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected m^, v^;
//   theta <- theta - lr * m^ / (sqrt(v^) + eps) - lr * wd * theta.
// Every parameter must carry a populated gradient (ContractError otherwise).
void adamw_step(ParamTable& params, OptimizerState& state, const TrainConfig& cfg);

// With probability flip_prob mirrors input channels and target left-right
// about the sagittal midline; both members flip together or neither.
SlicePair augment_flip(const SlicePair& sample, Rng& rng, float flip_prob = 0.5f);

// Shuffles the slice order (seeded by cfg.seed and epoch_index), batches,
// and runs forward / L1 / backward / adamw_step per batch. Returns the mean
// training loss. A non-finite loss aborts with a NumericFault naming the
// batch.
double train_epoch(Generator& model, const std::vector<SlicePair>& slices, OptimizerState& state,
                   const TrainConfig& cfg, int epoch_index);

// Frozen-weight mean L1 over a slice set (validation / test).
double evaluate_loss(const Generator& model, const std::vector<SlicePair>& slices, int batch_size);

struct EarlyStopDecision {
  bool stop = false;
  int best_epoch = 0;  // argmin of the history (first occurrence)
};

// Stop when no improvement over the best for `patience` consecutive epochs;
// improvements smaller than 1e-6 count as plateau.
EarlyStopDecision early_stop_check(const std::vector<double>& val_history, int patience);

// ---------------------------------------------------------------------------
// Fit driver
// ---------------------------------------------------------------------------

struct FitOptions {
  std::filesystem::path out_dir;  // loss_log.txt, best.ckpt, last.ckpt
  std::vector<Modality> modalities{Modality::t1w, Modality::flair};
  bool write_artifacts = true;
};

struct FitState {
  int start_epoch = 0;  // epochs already completed (resume point)
  std::vector<double> val_history;
};

struct FitReport {
  std::vector<double> train_losses, val_losses;  // full history incl. resume prefix
  int best_epoch = 0;
  double best_val_loss = 0.0;
  int epochs_run = 0;
  bool stopped_early = false;
};

FitReport fit(Generator& model, const std::vector<SlicePair>& train_slices,
              const std::vector<SlicePair>& val_slices, OptimizerState& state,
              const TrainConfig& cfg, const FitOptions& opts, const FitState& resume = {});

// Batch assembly shared with inference paths: [B, C, H, W] and [B, 1, H, W].
Tensor make_input_batch(const std::vector<const SlicePair*>& batch);
Tensor make_target_batch(const std::vector<const SlicePair*>& batch);

}  // namespace mprvit
