#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "cephland/config.hpp"

namespace cephland {

/// Epoch-indexed learning rate and gradient-accumulation interval.
class TrainingSchedule {
public:
    TrainingSchedule(double base_lr, LrDecay decay, std::vector<AccumulationStep> accumulation);
    explicit TrainingSchedule(const RunConfig& config);

    /// base_lr * factor^(number of decay epochs <= epoch)
    double lr_at(int epoch) const;

    /// Interval of the last schedule entry whose epoch is <= `epoch`.
    int accumulation_interval(int epoch) const;

    /// Whether an optimiser step follows forward pass `batch_index` (0-based)
    /// of an epoch with `n_batches` passes. Leftover gradients are flushed at
    /// the end of the epoch.
    static bool should_step(int batch_index, int n_batches, int interval);

private:
    double base_lr_;
    LrDecay decay_;
    std::vector<AccumulationStep> accumulation_;
};

/// Stops once `patience` epochs pass without a strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience);

    /// Returns true when `metric` improves on the best seen so far.
    bool update(int epoch, double metric);
    bool should_stop() const noexcept { return epochs_since_improvement_ >= patience_; }

    double best() const noexcept { return best_; }
    int best_epoch() const noexcept { return best_epoch_; }
    int epochs_since_improvement() const noexcept { return epochs_since_improvement_; }

private:
    int patience_;
    double best_{std::numeric_limits<double>::infinity()};
    int best_epoch_{-1};
    int epochs_since_improvement_{0};
};

struct TrainState {
    int fold{-1};
    int epoch{-1};
    int epochs_completed{0};
    double lr{0.0};
    int accumulation_interval{1};
    double last_train_loss{0.0};
    double last_val_mre_mm{std::numeric_limits<double>::quiet_NaN()};
    double best_val_mre_mm{std::numeric_limits<double>::infinity()};
    int best_epoch{-1};
    int epochs_since_improvement{0};
    bool early_stopped{false};
    std::string config_hash;
};

nlohmann::json to_json(const TrainState& state);

/// Callbacks driven by `run_schedule`.
struct EpochHooks {
    /// Runs one training epoch; returns its mean loss.
    std::function<double(int epoch, double lr, int accumulation_interval)> train_epoch;
    /// Returns the validation MRE (mm) after an epoch.
    std::function<double(int epoch)> validate;
    std::function<void(const TrainState&)> on_improvement;
    std::function<void(const TrainState&)> on_epoch_end;
    /// Optional: stop as soon as this returns true after an epoch.
    std::function<bool(const TrainState&)> stop_requested;
};

/// Epoch loop with LR decay, accumulation schedule and early stopping.
TrainState run_schedule(const TrainingSchedule& schedule, int max_epochs, int patience, EpochHooks& hooks,
                        TrainState state = {});

}  // namespace cephland
