#include "daed/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace daed {

void AnalysisReport::append_row(std::vector<double> row) {
    if (row.size() != columns.size())
        throw std::invalid_argument("analysis report: row width does not match columns");
    rows.push_back(std::move(row));
}

void AnalysisReport::set_meta(const std::string& key, const std::string& value) {
    metadata.emplace_back(key, value);
}

std::string AnalysisReport::csv_string() const {
    std::ostringstream os;
    os.precision(10);
    for (size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << '\n';
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
        os << '\n';
    }
    return os.str();
}

void AnalysisReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("analysis report: cannot open " + path.string());
    f << csv_string();
}

void AnalysisReport::write_manifest(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("analysis report: cannot open " + path.string());
    f << "kind=" << kind << '\n';
    f << "rows=" << rows.size() << '\n';
    for (const auto& [k, v] : metadata) f << k << '=' << v << '\n';
}

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// One-image view as a batch of one.
ImageBatch slice_image(const ImageBatch& set, int64_t index) {
    const int64_t per = set.pixels_per_image();
    Tensor t({1, set.channels(), set.height(), set.width()});
    std::copy_n(set.tensor.data() + index * per, per, t.data());
    return {std::move(t), set.provenance};
}

// Shared noise-then-denoise cell so the sweep and the transfer path produce
// identical numbers for identical (image, step, seed) triples.
ImageBatch recon_cell(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                      const StepMap& map, const ImageBatch& single, int t, uint64_t cell_seed) {
    Rng cell_rng(cell_seed);
    Tensor eps = gaussian(cell_rng, single.tensor.shape());
    ImageBatch xt = forward_marginal(s, single, t, eps);
    return denoise_from(s, cfg, net, xt, t, cell_rng, map);
}

uint64_t cell_seed(uint64_t base, int64_t image, int t) {
    return mix_seed(mix_seed(base, static_cast<uint64_t>(image)), static_cast<uint64_t>(t));
}

} // namespace

AnalysisReport schedule_table(const NoiseSchedule& s, double x0_ms) {
    AnalysisReport r;
    r.kind = "schedule";
    r.columns = {"t", "beta", "alpha_bar", "beta_tilde", "log_snr_mean", "delta_log_snr"};
    double prev_log = 0.0;
    for (int t = 1; t <= s.steps(); ++t) {
        const double log_snr = s.log_snr_mean(x0_ms, t);
        const double beta_tilde = t >= 2 ? s.beta_tilde(t) : 0.0;
        const double delta = t >= 2 ? log_snr - prev_log : 0.0;
        r.append_row({static_cast<double>(t), s.beta(t), s.alpha_bar(t), beta_tilde, log_snr, delta});
        prev_log = log_snr;
    }
    r.set_meta("schedule_hash", hex64(s.hash()));
    r.set_meta("x0_ms", std::to_string(x0_ms));
    return r;
}

AnalysisReport snr_report(const NoiseSchedule& s, const ImageBatch& dataset) {
    if (dataset.batch() < 1) throw std::invalid_argument("snr_report: dataset is empty");
    const double ms = dataset.mean_square();
    if (!(ms > 0.0)) throw std::invalid_argument("snr_report: zero signal");

    const auto per_image_ms = dataset.mean_square_per_image();
    std::vector<double> log_ms;
    for (double v : per_image_ms)
        if (v > 0.0) log_ms.push_back(std::log(v));

    AnalysisReport r;
    r.kind = "snr";
    r.columns = {"t", "log_snr_mean", "log_snr_std", "delta_log_snr"};
    int zero_crossing = -1;
    double prev = 0.0;
    for (int t = 1; t <= s.steps(); ++t) {
        const double log_ratio = std::log(s.alpha_bar(t) / s.one_minus_alpha_bar(t));
        const double mean_log_snr = std::log(s.snr_mean(ms, t));
        // per-image log SNR differs from the ratio only by log(ms_i)
        double var = 0.0;
        double mean_li = 0.0;
        for (double lm : log_ms) mean_li += log_ratio + lm;
        mean_li /= static_cast<double>(log_ms.size());
        for (double lm : log_ms) {
            const double d = log_ratio + lm - mean_li;
            var += d * d;
        }
        const double stddev = log_ms.size() > 1 ? std::sqrt(var / static_cast<double>(log_ms.size() - 1)) : 0.0;
        const double delta = t >= 2 ? mean_log_snr - prev : 0.0;
        if (zero_crossing < 0 && mean_log_snr <= 0.0) zero_crossing = t;
        r.append_row({static_cast<double>(t), mean_log_snr, stddev, delta});
        prev = mean_log_snr;
    }
    r.set_meta("schedule_hash", hex64(s.hash()));
    r.set_meta("dataset", dataset.provenance);
    r.set_meta("zero_crossing_step", std::to_string(zero_crossing));
    return r;
}

AnalysisReport recon_sweep(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                           const ImageBatch& dataset, double t_max_fraction, int stride, Rng& rng,
                           const StepMap& map) {
    if (!(t_max_fraction > 0.0) || t_max_fraction > 1.0)
        throw std::invalid_argument("recon_sweep: t_max_fraction must lie in (0, 1]");
    if (stride < 1) throw std::invalid_argument("recon_sweep: stride must be >= 1");
    const int t_max = std::max(1, static_cast<int>(t_max_fraction * s.steps()));
    const uint64_t base = rng.next_u64();
    const int64_t n = dataset.batch();

    AnalysisReport r;
    r.kind = "recon_sweep";
    r.columns = {"t", "mae", "mae_std", "ms_ssim"};
    for (int t = 1; t <= t_max; t += stride) {
        std::vector<double> maes(static_cast<size_t>(n), 0.0);
        double ssim_acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            ImageBatch single = slice_image(dataset, i);
            ImageBatch recon = recon_cell(s, cfg, net, map, single, t, cell_seed(base, i, t));
            maes[static_cast<size_t>(i)] = mae(recon, single);
            ssim_acc += ms_ssim(recon, single).value;
        }
        double mean = 0.0;
        for (double v : maes) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : maes) var += (v - mean) * (v - mean);
        const double stddev = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
        r.append_row({static_cast<double>(t), mean, stddev, ssim_acc / static_cast<double>(n)});
    }
    r.set_meta("schedule_hash", hex64(s.hash()));
    r.set_meta("model_hash", hex64(net.param_hash()));
    r.set_meta("dataset", dataset.provenance);
    r.set_meta("seed", std::to_string(base));
    return r;
}

SourceModel SourceModel::ddgm(const NoiseSchedule& s, const Unet& net, ReverseKernelConfig cfg) {
    SourceModel m;
    m.schedule = &s;
    m.eps_net = &net;
    m.kernel = cfg;
    m.map = StepMap{0, s.steps()};
    return m;
}

SourceModel SourceModel::from_daed(const DaedModel& d) {
    SourceModel m;
    m.daed = &d;
    return m;
}

AnalysisReport transfer_recon(const SourceModel& model, std::span<const ImageBatch> targets,
                              double beta, Rng& rng) {
    AnalysisReport r;
    r.kind = "transfer";
    r.columns = {"target", "path", "step_k", "noise_level", "mae", "ms_ssim"};
    const uint64_t base = rng.next_u64();
    r.set_meta("seed", std::to_string(base));
    r.set_meta("beta", std::to_string(beta));

    for (size_t ti = 0; ti < targets.size(); ++ti) {
        const ImageBatch& target = targets[ti];
        const int64_t n = target.batch();
        double mae_acc = 0.0, ssim_acc = 0.0;
        double noise_level = beta;
        int step_k = 0;
        double path = 0.0;
        if (model.daed == nullptr) {
            // DDGM path: map the noise level to the equivalent step and run
            // that many backward steps.
            const NoiseSchedule& s = *model.schedule;
            step_k = step_for_noise_level(s, beta);
            noise_level = s.one_minus_alpha_bar(step_k);
            for (int64_t i = 0; i < n; ++i) {
                ImageBatch single = slice_image(target, i);
                ImageBatch recon = recon_cell(s, model.kernel, *model.eps_net, model.map, single, step_k,
                                              cell_seed(base, i, step_k));
                mae_acc += mae(recon, single);
                ssim_acc += ms_ssim(recon, single).value;
            }
        } else {
            // DAED path: one deterministic DAE pass on the corrupted image.
            path = 1.0;
            const DaedModel& d = *model.daed;
            for (int64_t i = 0; i < n; ++i) {
                ImageBatch single = slice_image(target, i);
                Rng cell(cell_seed(base, i, 0));
                Tensor x1 = axpy_like(std::sqrt(1.0 - beta), single.tensor, std::sqrt(beta),
                                      gaussian(cell, single.tensor.shape()));
                ImageBatch recon{clamp(d.dae.forward(x1), -1.0, 1.0), single.provenance};
                mae_acc += mae(recon, single);
                ssim_acc += ms_ssim(recon, single).value;
            }
        }
        r.append_row({static_cast<double>(ti), path, static_cast<double>(step_k), noise_level,
                      mae_acc / static_cast<double>(n), ssim_acc / static_cast<double>(n)});
        r.set_meta("target_" + std::to_string(ti), target.provenance);
    }
    return r;
}

AnalysisReport switch_sweep(const NoiseSchedule& s, const Unet& net, std::span<const double> targets,
                            const ImageBatch& dataset, const ImageBatch& heldout,
                            const SwitchSweepConfig& cfg, Rng& rng) {
    AnalysisReport r;
    r.kind = "switch_sweep";
    r.columns = {"beta1", "step_k", "one_minus_abar_k", "log_snr", "frechet_proxy"};
    const double ms = dataset.mean_square();
    const uint64_t base = rng.next_u64();

    struct Row {
        double log_snr;
        std::vector<double> values;
    };
    std::vector<Row> rows;
    for (size_t i = 0; i < targets.size(); ++i) {
        const double beta1_req = targets[i];
        const int k = step_for_noise_level(s, beta1_req);
        Rng run_rng(mix_seed(base, static_cast<uint64_t>(i)));
        DaedModel model = split_from_ddgm(s, net, k, run_rng);

        TrainConfig tc;
        tc.model = TrainConfig::ModelKind::daed;
        tc.batch = cfg.batch;
        tc.total_steps = cfg.dae_train_budget;
        tc.lr = cfg.lr;
        train_dae(tc, model.dae, dataset, run_rng, model.beta1);

        Shape shape{cfg.n_samples, dataset.channels(), dataset.height(), dataset.width()};
        ImageBatch samples = daed_sample(model, shape, run_rng);
        const double proxy = gaussian_frechet(samples, heldout, cfg.proj_dim, base);
        const double log_snr = s.log_snr_mean(ms, k);
        rows.push_back({log_snr,
                        {model.beta1, static_cast<double>(k), s.one_minus_alpha_bar(k), log_snr, proxy}});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.log_snr < b.log_snr; });
    for (auto& row : rows) r.append_row(std::move(row.values));
    r.set_meta("schedule_hash", hex64(s.hash()));
    r.set_meta("model_hash", hex64(net.param_hash()));
    r.set_meta("dataset", dataset.provenance);
    r.set_meta("seed", std::to_string(base));
    return r;
}

AnalysisReport loss_dynamics_report(const LossLedger& ledger) {
    const auto rows = ledger_cumsum(ledger);
    const double total = rows.empty() ? 0.0 : rows.back().cumulative;

    AnalysisReport r;
    r.kind = "loss_dynamics";
    r.columns = {"t", "mean_loss", "cumulative", "cumulative_fraction"};
    for (const auto& snap : ledger.snapshots())
        r.columns.push_back("mean_at_" + std::to_string(static_cast<int>(snap.fraction * 100 + 0.5)) + "pct");
    for (const auto& row : rows) {
        std::vector<double> vals{static_cast<double>(row.t), row.mean_loss, row.cumulative,
                                 total > 0.0 ? row.cumulative / total : 0.0};
        for (const auto& snap : ledger.snapshots())
            vals.push_back(snap.mean[static_cast<size_t>(row.t - 1)]);
        r.append_row(std::move(vals));
    }
    r.set_meta("total_draws", std::to_string(ledger.total_count()));
    return r;
}

} // namespace daed
