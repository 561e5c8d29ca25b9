#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "daed/diffusion.hpp"
#include "daed/image.hpp"
#include "daed/network.hpp"
#include "daed/schedule.hpp"

namespace daed {

struct TrainConfig {
    enum class Objective { vlb, simple };
    enum class ModelKind { ddgm, daed };
    enum class SamplerKind { uniform, beta_weighted };

    Objective objective = Objective::simple;
    SamplerKind sampler = SamplerKind::uniform;
    ModelKind model = ModelKind::ddgm;
    int batch = 8;
    int64_t total_steps = 1000;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    uint64_t seed = 0;
    ReverseKernelConfig kernel;

    void validate() const;
};

// Draws training steps t in [1, T], either uniformly or with probability
// proportional to beta_t.
class StepSampler {
public:
    static StepSampler uniform(int steps);
    static StepSampler beta_weighted(const NoiseSchedule& s);

    int sample(Rng& rng) const;
    int steps() const { return static_cast<int>(cumulative_.size()); }
    TrainConfig::SamplerKind kind() const { return kind_; }
    std::span<const double> weights() const { return weights_; }

private:
    TrainConfig::SamplerKind kind_ = TrainConfig::SamplerKind::uniform;
    std::vector<double> weights_;    // normalized
    std::vector<double> cumulative_; // cumulative_[i] = sum of weights_[0..i]
};

struct AdamWState {
    std::vector<scalar> m, v;
    int64_t step = 0;
    int64_t skipped = 0; // updates dropped due to non-finite gradients

    explicit AdamWState(size_t n) : m(n, scalar(0)), v(n, scalar(0)) {}
};

// Decoupled weight decay update with bias-corrected moments. Non-finite
// gradients skip the update and bump the skip counter.
void adamw_update(std::span<scalar> params, std::span<const scalar> grads, AdamWState& state,
                  double lr, double beta1, double beta2, double eps, double weight_decay);

// Per-step-index running mean of the training loss, with snapshots taken
// at fractions of the run.
class LossLedger {
public:
    explicit LossLedger(int steps);

    void record(int t, double loss);
    void snapshot(double progress_fraction);

    int steps() const { return static_cast<int>(sum_.size()); }
    int64_t count(int t) const { return count_[static_cast<size_t>(t - 1)]; }
    int64_t total_count() const;
    double mean(int t) const;

    struct Snapshot {
        double fraction;
        std::vector<double> mean; // by step index, 0 where never drawn
    };
    const std::vector<Snapshot>& snapshots() const { return snapshots_; }
    std::vector<double> means() const;

private:
    std::vector<double> sum_;
    std::vector<int64_t> count_;
    std::vector<Snapshot> snapshots_;
};

struct LedgerRow {
    int t;
    double mean_loss;
    double cumulative; // running sum of mean_loss over steps <= t
};

// Per-step means and their cumulative sum, ordered by step index.
std::vector<LedgerRow> ledger_cumsum(const LossLedger& ledger);

struct LogRow {
    int64_t update;
    double t_drawn_mean;
    double loss;
    double loss_dae;  // 0 for plain DDGM runs
    double loss_diff; // == loss for plain DDGM runs
    double grad_norm;
    bool clipped;
};

struct TrainState {
    LossLedger ledger;
    std::vector<LogRow> log;
    int64_t skipped_updates = 0;
    double initial_running_loss = 0.0; // mean loss over the first window
    double final_running_loss = 0.0;   // mean loss over the last window
};

// Writes the training log CSV (update, t_drawn_mean, loss, loss_dae,
// loss_diff, grad_norm, clipped).
void write_training_log(const TrainState& state, const std::filesystem::path& path);

using CheckpointHook = std::function<void(int64_t update, const Unet& net)>;

// DDGM training: per update draw a batch, per-sample steps and noise,
// optimize the configured objective, and record per-step losses.
TrainState train_ddgm(const TrainConfig& cfg, const NoiseSchedule& s, Unet& net,
                      const ImageBatch& dataset, Rng& rng, const CheckpointHook& hook = {});

// DAED training: per update the DAE sees a fresh x1 ~ q(x1|x0) with
// variance beta1 and the generator trains on the tail process over x1.
// The two parameter sets never exchange gradients.
TrainState train_daed(const TrainConfig& cfg, const NoiseSchedule& tail, Unet& dae, Unet& eps_net,
                      const ImageBatch& dataset, Rng& rng, double beta1,
                      const StepMap& gen_map = {});

// Train just a DAE on fresh q(x1|x0) pairs at a fixed noise level.
TrainState train_dae(const TrainConfig& cfg, Unet& dae, const ImageBatch& dataset, Rng& rng,
                     double beta1);

} // namespace daed
