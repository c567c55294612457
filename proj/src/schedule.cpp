#include "cephland/schedule.hpp"

#include <cmath>

namespace cephland {

TrainingSchedule::TrainingSchedule(double base_lr, LrDecay decay, std::vector<AccumulationStep> accumulation)
    : base_lr_(base_lr), decay_(std::move(decay)), accumulation_(std::move(accumulation))
{
    if (!(base_lr_ > 0.0))
        throw Error("learning rate must be positive");
    if (accumulation_.empty() || accumulation_.front().epoch != 0)
        throw Error("accumulation schedule must start at epoch 0");
}

TrainingSchedule::TrainingSchedule(const RunConfig& config)
    : TrainingSchedule(config.optimizer.lr, config.lr_decay, config.accumulation_schedule)
{
}

double TrainingSchedule::lr_at(int epoch) const
{
    int n = 0;
    for (int e : decay_.epochs)
        if (e <= epoch)
            ++n;
    return base_lr_ * std::pow(decay_.factor, n);
}

int TrainingSchedule::accumulation_interval(int epoch) const
{
    int interval = accumulation_.front().interval;
    for (const auto& step : accumulation_)
        if (step.epoch <= epoch)
            interval = step.interval;
    return interval;
}

bool TrainingSchedule::should_step(int batch_index, int n_batches, int interval)
{
    if (interval < 1)
        throw Error("accumulation interval must be >= 1");
    return (batch_index + 1) % interval == 0 || batch_index + 1 == n_batches;
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience)
{
    if (patience < 1)
        throw Error("patience must be >= 1");
}

bool EarlyStopping::update(int epoch, double metric)
{
    if (std::isfinite(metric) && metric < best_) {
        best_ = metric;
        best_epoch_ = epoch;
        epochs_since_improvement_ = 0;
        return true;
    }
    ++epochs_since_improvement_;
    return false;
}

nlohmann::json to_json(const TrainState& s)
{
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"fold", s.fold},
            {"epoch", s.epoch},
            {"epochs_completed", s.epochs_completed},
            {"lr", s.lr},
            {"accumulation_interval", s.accumulation_interval},
            {"last_train_loss", num(s.last_train_loss)},
            {"last_val_mre_mm", num(s.last_val_mre_mm)},
            {"best_val_mre_mm", num(s.best_val_mre_mm)},
            {"best_epoch", s.best_epoch},
            {"epochs_since_improvement", s.epochs_since_improvement},
            {"early_stopped", s.early_stopped},
            {"config_hash", s.config_hash}};
}

TrainState run_schedule(const TrainingSchedule& schedule, int max_epochs, int patience, EpochHooks& hooks,
                        TrainState state)
{
    if (!hooks.train_epoch || !hooks.validate)
        throw Error("train_epoch and validate hooks are required");
    EarlyStopping stopper(patience);
    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        state.epoch = epoch;
        state.lr = schedule.lr_at(epoch);
        state.accumulation_interval = schedule.accumulation_interval(epoch);
        state.last_train_loss = hooks.train_epoch(epoch, state.lr, state.accumulation_interval);
        state.last_val_mre_mm = hooks.validate(epoch);
        state.epochs_completed = epoch + 1;
        const bool improved = stopper.update(epoch, state.last_val_mre_mm);
        state.best_val_mre_mm = stopper.best();
        state.best_epoch = stopper.best_epoch();
        state.epochs_since_improvement = stopper.epochs_since_improvement();
        if (improved && hooks.on_improvement)
            hooks.on_improvement(state);
        if (hooks.on_epoch_end)
            hooks.on_epoch_end(state);
        if (stopper.should_stop()) {
            state.early_stopped = true;
            break;
        }
        if (hooks.stop_requested && hooks.stop_requested(state))
            break;
    }
    return state;
}

}  // namespace cephland
