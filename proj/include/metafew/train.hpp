#pragma once

#include <iosfwd>
#include <optional>

#include "metafew/checkpoint.hpp"
#include "metafew/config.hpp"

namespace metafew {

struct EpochLog {
  int64_t epoch = 0;
  double train_loss = 0.0;  // mean query loss per episode
  double lambda = 0.0;
  double lr = 0.0;
  double val_accuracy = -1.0;  // < 0 when no validation ran this epoch
};

struct TrainResult {
  ModelBundle model;
  AdamState opt;
  std::vector<EpochLog> log;
  double best_val_accuracy = -1.0;
  std::string last_checkpoint;
  std::string best_checkpoint;
};

// Full training loop: per epoch, sample episode batches, apply meta-steps,
// advance the switch and learning-rate schedules, log, and checkpoint. With a
// resume checkpoint, training continues from its weights and optimizer state.
TrainResult train_loop(const RunConfig& cfg, std::ostream* progress = nullptr,
                       const Checkpoint* resume = nullptr);

// restore model (+ optimizer when present) from a checkpoint
void restore_model(ModelBundle& model, AdamState* opt, const Checkpoint& ck);
Checkpoint snapshot(const ModelBundle& model, const AdamState& opt, const RunConfig& cfg,
                    int64_t epoch);

void write_epoch_log_csv(const std::vector<EpochLog>& log, const std::string& path);

}  // namespace metafew
