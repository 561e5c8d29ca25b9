#pragma once

#include <filesystem>

#include "daed/diffusion.hpp"
#include "daed/network.hpp"
#include "daed/schedule.hpp"
#include "daed/training.hpp"

namespace daed {

// Composite model: a diffusion generator over x1..xT with its own schedule
// plus a single-pass denoiser for the x0 <-> x1 hop. Parameter stores are
// disjoint by construction.
struct DaedModel {
    double beta1 = 0.1;
    NoiseSchedule tail;
    Unet dae;
    Unet generator;
    int switch_step = 0;  // original-schedule step the split corresponds to (0 = built directly)
    StepMap gen_map;      // time mapping for the generator
    ReverseKernelConfig kernel;
};

struct SplitSchedule {
    double beta1 = 0.0;   // 1 - alpha_bar_k of the source schedule
    NoiseSchedule tail;   // steps k+1..T reindexed from 1
    int switch_step = 0;  // k
    StepMap gen_map;      // {k, T} so a net trained on the source schedule keeps its clock
};

// Split a source schedule at step k: the first k steps collapse into a
// single q(x1|x0) with variance 1 - alpha_bar_k, the rest become the tail.
SplitSchedule split_schedule(const NoiseSchedule& s, int k);

// Split a trained DDGM: reuse its epsilon net as the generator and pair it
// with a fresh DAE of mirrored topology.
DaedModel split_from_ddgm(const NoiseSchedule& s, const Unet& net, int k, Rng& dae_init_rng);

// Build a DAED directly with a tail of its own (from-scratch training).
DaedModel make_daed(double beta1, NoiseSchedule tail, Unet dae, Unet generator);

// Smallest step k of the schedule whose accumulated noise reaches the
// single-shot level: 1 - alpha_bar_k >= beta. Throws DataError when the
// schedule never reaches it.
int step_for_noise_level(const NoiseSchedule& s, double beta);

// Table-style presets pairing beta1 with a tail length for a given base
// schedule length.
struct DaedPreset {
    int base_steps;
    double beta1;
    int tail_steps;
};
std::span<const DaedPreset> daed_presets();

// Ancestral-sample the tail down to x1, then one deterministic DAE pass,
// clamped to [-1, 1].
ImageBatch daed_sample(const DaedModel& m, const Shape& shape, Rng& rng);

struct DaedObjective {
    double loss_dae = 0.0;
    double loss_diff = 0.0;
    double total = 0.0;
};

// Monte-Carlo estimate of the two disjoint objectives on a batch.
DaedObjective daed_objective(const DaedModel& m, const ImageBatch& x0, Rng& rng,
                             TrainConfig::Objective objective = TrainConfig::Objective::simple);

// Delegates to step_at_log_snr; the returned step is a split point k.
SwitchPoint choose_switch_point(const NoiseSchedule& s, double dataset_ms, double target_log_snr = 4.0);

// Container checkpoint: both component nets plus beta1/tail descriptor,
// same framing as network checkpoints with kind tag "DAED".
void save_daed_checkpoint(const DaedModel& m, const std::filesystem::path& path);
DaedModel load_daed_checkpoint(const std::filesystem::path& path);

// Peek at a checkpoint to tell containers from plain nets.
bool is_daed_checkpoint(const std::filesystem::path& path);

} // namespace daed
