#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "daed/daed.hpp"
#include "daed/diffusion.hpp"
#include "daed/image.hpp"
#include "daed/metrics.hpp"
#include "daed/schedule.hpp"
#include "daed/training.hpp"

namespace daed {

// Tabular experiment output. Rows are rectangular; metadata carries enough
// identifiers (hashes, seeds, dataset ids) to re-run the report.
struct AnalysisReport {
    std::string kind;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::vector<std::pair<std::string, std::string>> metadata;

    void append_row(std::vector<double> row);
    void set_meta(const std::string& key, const std::string& value);

    std::string csv_string() const;
    void write_csv(const std::filesystem::path& path) const;
    // "key=value" sidecar next to the CSV.
    void write_manifest(const std::filesystem::path& path) const;
};

// Schedule table: t, beta, alpha_bar, beta_tilde, log_snr_mean,
// delta_log_snr for a unit-signal (or given) mean square.
AnalysisReport schedule_table(const NoiseSchedule& s, double x0_ms = 1.0);

// Per-step log-SNR of a dataset: mean (log of batch-mean SNR), std over
// images, and the discrete derivative; flags the zero crossing.
AnalysisReport snr_report(const NoiseSchedule& s, const ImageBatch& dataset);

// Noise-then-reconstruct sweep over the first t_max_fraction of steps.
AnalysisReport recon_sweep(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                           const ImageBatch& dataset, double t_max_fraction, int stride, Rng& rng,
                           const StepMap& map);

// Either a plain DDGM (schedule + eps net) or a DAED model.
struct SourceModel {
    const NoiseSchedule* schedule = nullptr;
    const Unet* eps_net = nullptr;
    ReverseKernelConfig kernel;
    StepMap map;
    const DaedModel* daed = nullptr; // when set, the DAE path is used

    static SourceModel ddgm(const NoiseSchedule& s, const Unet& net, ReverseKernelConfig cfg = {});
    static SourceModel from_daed(const DaedModel& m);
};

// Corrupt each target with a single-shot noise level and denoise it with
// the model's own path; one row per target dataset.
AnalysisReport transfer_recon(const SourceModel& model, std::span<const ImageBatch> targets,
                              double beta, Rng& rng);

struct SwitchSweepConfig {
    int64_t dae_train_budget = 500;
    int n_samples = 64;
    int proj_dim = 16;
    int batch = 8;
    double lr = 1e-3;
};

// For each candidate beta1: split the pretrained DDGM, train a fresh DAE,
// sample, and score the Frechet proxy against held-out data. Rows sorted
// by the log-SNR at the split.
AnalysisReport switch_sweep(const NoiseSchedule& s, const Unet& net, std::span<const double> targets,
                            const ImageBatch& dataset, const ImageBatch& heldout,
                            const SwitchSweepConfig& cfg, Rng& rng);

// Ledger dump: per-step mean loss, cumulative sum, cumulative fraction,
// plus one column per training-progress snapshot.
AnalysisReport loss_dynamics_report(const LossLedger& ledger);

} // namespace daed
