#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cmsa/checkpoint.hpp"
#include "cmsa/config.hpp"
#include "cmsa/data.hpp"
#include "cmsa/network.hpp"
#include "cmsa/optim.hpp"

namespace cmsa {

/// Seed of the named random stream `name` (init, augment, shuffle) for
/// epoch `index`, derived from the run seed.
std::uint64_t substream_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

struct EvalResult {
    double accuracy = 0.0;
    /// Mean cross-entropy without label smoothing.
    double loss = 0.0;
    std::int64_t count = 0;
};

/// Top-1 accuracy and mean loss with running statistics, no augmentation.
EvalResult evaluate(const Model& model, const Dataset& data, int batch, const TrainConfig& config);

struct TrainState {
    Model model;
    OptimState optim;
    /// Completed epochs.
    std::int64_t epoch = 0;
};

TrainState init_training(const RunConfig& config);
Checkpoint make_checkpoint(const RunConfig& config, const TrainState& state);
TrainState state_from_checkpoint(const Checkpoint& checkpoint);

struct EpochResult {
    double loss = 0.0;
    double accuracy = 0.0;
    /// Learning rate of the epoch's last optimizer step.
    double lr = 0.0;
};

/// One shuffled pass over `data` in batches of batch_size, each split into
/// micro-batches whose gradients are summed before one AdamW step. Throws
/// NumericError with the learning rate and batch index on a non-finite loss.
EpochResult train_epoch(TrainState& state, const Dataset& data, const RunConfig& config, const Schedule& schedule);

struct EpochMetrics {
    std::int64_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0, train_acc = 0.0;
    double val_loss = 0.0, val_acc = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_acc,val_loss,val_acc";
std::string metrics_row(const EpochMetrics& m);

struct RunOptions {
    /// Directory for metrics.csv and checkpoint.ckpt; empty writes nothing.
    std::string out_dir;
    std::optional<Checkpoint> resume;
    /// Called after every epoch.
    std::function<void(const EpochMetrics&)> on_epoch;
    /// Return after this many epochs of this call (0: no limit), checkpoint
    /// written, as if interrupted; a later call with `resume` continues.
    std::int64_t stop_after = 0;
};

struct RunResult {
    TrainState state;
    std::vector<EpochMetrics> history;
    bool stopped_early = false;
};

/// Trains on the first train.subset images (all when 0) to
/// config.train.epochs or the early-stop accuracy, evaluating on `val`
/// after every epoch. A resumed run keeps the rows of metrics.csv
/// up to the checkpoint's epoch and appends from there.
RunResult run_training(const RunConfig& config, const Dataset& train, const Dataset& val, const RunOptions& options);

/// First `count` records of `data`.
Dataset take_subset(const Dataset& data, std::int64_t count);

}  // namespace cmsa
