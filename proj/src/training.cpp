#include "daed/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace daed {

void TrainConfig::validate() const {
    if (batch < 1) throw std::invalid_argument("train config: batch must be >= 1");
    if (total_steps < 1) throw std::invalid_argument("train config: total steps must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: learning rate must be > 0");
}

StepSampler StepSampler::uniform(int steps) {
    if (steps < 1) throw std::invalid_argument("step sampler: T must be >= 1");
    StepSampler s;
    s.kind_ = TrainConfig::SamplerKind::uniform;
    s.weights_.assign(static_cast<size_t>(steps), 1.0 / steps);
    s.cumulative_.resize(static_cast<size_t>(steps));
    double acc = 0.0;
    for (size_t i = 0; i < s.weights_.size(); ++i) {
        acc += s.weights_[i];
        s.cumulative_[i] = acc;
    }
    s.cumulative_.back() = 1.0;
    return s;
}

StepSampler StepSampler::beta_weighted(const NoiseSchedule& sched) {
    StepSampler s;
    s.kind_ = TrainConfig::SamplerKind::beta_weighted;
    double total = 0.0;
    for (int t = 1; t <= sched.steps(); ++t) total += sched.beta(t);
    s.weights_.resize(static_cast<size_t>(sched.steps()));
    s.cumulative_.resize(static_cast<size_t>(sched.steps()));
    double acc = 0.0;
    for (int t = 1; t <= sched.steps(); ++t) {
        s.weights_[static_cast<size_t>(t - 1)] = sched.beta(t) / total;
        acc += s.weights_[static_cast<size_t>(t - 1)];
        s.cumulative_[static_cast<size_t>(t - 1)] = acc;
    }
    s.cumulative_.back() = 1.0;
    return s;
}

int StepSampler::sample(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), u);
    return static_cast<int>(it - cumulative_.begin()) + 1;
}

void adamw_update(std::span<scalar> params, std::span<const scalar> grads, AdamWState& state,
                  double lr, double beta1, double beta2, double eps, double weight_decay) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adamw: parameter/gradient/state length mismatch");
    for (scalar g : grads) {
        if (!std::isfinite(static_cast<double>(g))) {
            ++state.skipped;
            return;
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double m = beta1 * static_cast<double>(state.m[i]) + (1.0 - beta1) * g;
        const double v = beta2 * static_cast<double>(state.v[i]) + (1.0 - beta2) * g * g;
        state.m[i] = static_cast<scalar>(m);
        state.v[i] = static_cast<scalar>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double p = static_cast<double>(params[i]);
        p -= lr * weight_decay * p;
        p -= lr * mhat / (std::sqrt(vhat) + eps);
        params[i] = static_cast<scalar>(p);
    }
}

LossLedger::LossLedger(int steps)
    : sum_(static_cast<size_t>(steps), 0.0), count_(static_cast<size_t>(steps), 0) {
    if (steps < 1) throw std::invalid_argument("loss ledger: T must be >= 1");
}

void LossLedger::record(int t, double loss) {
    if (t < 1 || t > steps()) throw std::invalid_argument("loss ledger: step out of range");
    sum_[static_cast<size_t>(t - 1)] += loss;
    ++count_[static_cast<size_t>(t - 1)];
}

double LossLedger::mean(int t) const {
    const auto i = static_cast<size_t>(t - 1);
    return count_[i] == 0 ? 0.0 : sum_[i] / static_cast<double>(count_[i]);
}

int64_t LossLedger::total_count() const {
    int64_t acc = 0;
    for (int64_t c : count_) acc += c;
    return acc;
}

std::vector<double> LossLedger::means() const {
    std::vector<double> out(sum_.size(), 0.0);
    for (int t = 1; t <= steps(); ++t) out[static_cast<size_t>(t - 1)] = mean(t);
    return out;
}

void LossLedger::snapshot(double progress_fraction) {
    snapshots_.push_back({progress_fraction, means()});
}

std::vector<LedgerRow> ledger_cumsum(const LossLedger& ledger) {
    if (ledger.total_count() == 0) throw std::invalid_argument("ledger_cumsum: empty ledger");
    std::vector<LedgerRow> rows;
    rows.reserve(static_cast<size_t>(ledger.steps()));
    double acc = 0.0;
    for (int t = 1; t <= ledger.steps(); ++t) {
        const double m = ledger.mean(t);
        acc += m;
        rows.push_back({t, m, acc});
    }
    return rows;
}

void write_training_log(const TrainState& state, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("training log: cannot open " + path.string());
    f << "update,t_drawn_mean,loss,loss_dae,loss_diff,grad_norm,clipped\n";
    for (const auto& r : state.log)
        f << r.update << ',' << r.t_drawn_mean << ',' << r.loss << ',' << r.loss_dae << ',' << r.loss_diff
          << ',' << r.grad_norm << ',' << (r.clipped ? 1 : 0) << '\n';
}

namespace {

// Gather a batch of images drawn with replacement.
Tensor draw_batch(const ImageBatch& dataset, int batch, Rng& rng) {
    const int64_t n = dataset.batch();
    const int64_t per = dataset.pixels_per_image();
    Tensor out({batch, dataset.channels(), dataset.height(), dataset.width()});
    for (int b = 0; b < batch; ++b) {
        const int64_t pick = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n));
        std::copy_n(dataset.tensor.data() + pick * per, per, out.data() + static_cast<int64_t>(b) * per);
    }
    return out;
}

// Global-norm clip in place; returns the pre-clip norm.
double clip_gradients(std::vector<scalar>& grad, double max_norm, bool& clipped) {
    double sq = 0.0;
    for (scalar g : grad) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    clipped = false;
    if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
        const scalar f = static_cast<scalar>(max_norm / norm);
        for (auto& g : grad) g *= f;
        clipped = true;
    }
    return norm;
}

double running_mean(const std::vector<LogRow>& log, size_t begin, size_t end,
                    double LogRow::* field) {
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = begin; i < end && i < log.size(); ++i, ++n) acc += log[i].*field;
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

void finish_running_stats(TrainState& st) {
    const size_t n = st.log.size();
    const size_t window = std::max<size_t>(1, std::min<size_t>(100, n / 10 + 1));
    st.initial_running_loss = running_mean(st.log, 0, window, &LogRow::loss);
    st.final_running_loss = running_mean(st.log, n - std::min(window, n), n, &LogRow::loss);
}

StepSampler make_sampler(const TrainConfig& cfg, const NoiseSchedule& s) {
    return cfg.sampler == TrainConfig::SamplerKind::uniform ? StepSampler::uniform(s.steps())
                                                            : StepSampler::beta_weighted(s);
}

constexpr int kSnapshots = 10;

} // namespace

TrainState train_ddgm(const TrainConfig& cfg, const NoiseSchedule& s, Unet& net,
                      const ImageBatch& dataset, Rng& rng, const CheckpointHook& hook) {
    cfg.validate();
    if (dataset.batch() < 1) throw std::invalid_argument("train_ddgm: dataset is empty");
    if (net.kind() != NetKind::epsilon) throw std::invalid_argument("train_ddgm: needs an epsilon net");

    const StepSampler sampler = make_sampler(cfg, s);
    const StepMap map{0, s.steps()};
    AdamWState opt(static_cast<size_t>(net.param_count()));
    TrainState st{LossLedger(s.steps()), {}, 0, 0.0, 0.0};
    const int64_t per = dataset.pixels_per_image();

    int64_t next_snapshot = 1;
    for (int64_t update = 1; update <= cfg.total_steps; ++update) {
        Tensor x0b = draw_batch(dataset, cfg.batch, rng);
        std::vector<int> ts(static_cast<size_t>(cfg.batch));
        std::vector<double> t_norm(static_cast<size_t>(cfg.batch));
        double t_sum = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            ts[static_cast<size_t>(b)] = sampler.sample(rng);
            t_norm[static_cast<size_t>(b)] = map.norm(ts[static_cast<size_t>(b)]);
            t_sum += ts[static_cast<size_t>(b)];
        }
        Tensor eps = gaussian(rng, x0b.shape());
        Tensor xt({cfg.batch, dataset.channels(), dataset.height(), dataset.width()});
        for (int b = 0; b < cfg.batch; ++b) {
            const int t = ts[static_cast<size_t>(b)];
            const scalar sa = static_cast<scalar>(std::sqrt(s.alpha_bar(t)));
            const scalar sn = static_cast<scalar>(std::sqrt(s.one_minus_alpha_bar(t)));
            for (int64_t i = 0; i < per; ++i) {
                const int64_t j = static_cast<int64_t>(b) * per + i;
                xt[j] = sa * x0b[j] + sn * eps[j];
            }
        }

        std::vector<double> per_sample(static_cast<size_t>(cfg.batch), 0.0);
        ImageBatch x0_view{x0b, dataset.provenance};
        auto loss_fn = [&](const Tensor& pred, Tensor& dpred) {
            if (cfg.objective == TrainConfig::Objective::simple)
                return simple_objective(pred, eps, dpred, per_sample);
            return vlb_objective(s, cfg.kernel, pred, x0_view, xt, ts, dpred, per_sample);
        };
        GradientBundle gb = net.loss_and_grad(xt, t_norm, loss_fn, &rng);

        bool clipped = false;
        const double gnorm = clip_gradients(gb.grad, cfg.grad_clip, clipped);
        const int64_t before = opt.skipped;
        adamw_update(net.params(), gb.grad, opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                     cfg.weight_decay);
        st.skipped_updates = opt.skipped;
        if (opt.skipped == before) {
            for (int b = 0; b < cfg.batch; ++b)
                st.ledger.record(ts[static_cast<size_t>(b)], per_sample[static_cast<size_t>(b)]);
        }

        st.log.push_back({update, t_sum / cfg.batch, gb.loss, 0.0, gb.loss, gnorm, clipped});
        if (update * kSnapshots >= next_snapshot * cfg.total_steps) {
            st.ledger.snapshot(static_cast<double>(update) / static_cast<double>(cfg.total_steps));
            ++next_snapshot;
        }
        if (hook) hook(update, net);
    }
    finish_running_stats(st);
    return st;
}

TrainState train_dae(const TrainConfig& cfg, Unet& dae, const ImageBatch& dataset, Rng& rng,
                     double beta1) {
    cfg.validate();
    if (!(beta1 > 0.0) || !(beta1 < 1.0)) throw std::invalid_argument("train_dae: beta1 must lie in (0, 1)");
    if (dataset.batch() < 1) throw std::invalid_argument("train_dae: dataset is empty");
    if (dae.kind() != NetKind::dae) throw std::invalid_argument("train_dae: needs a dae net");

    AdamWState opt(static_cast<size_t>(dae.param_count()));
    TrainState st{LossLedger(1), {}, 0, 0.0, 0.0};
    const double sig_coef = std::sqrt(1.0 - beta1);
    const double noise_coef = std::sqrt(beta1);
    for (int64_t update = 1; update <= cfg.total_steps; ++update) {
        Tensor x0b = draw_batch(dataset, cfg.batch, rng);
        Tensor x1 = axpy_like(sig_coef, x0b, noise_coef, gaussian(rng, x0b.shape()));
        auto loss_fn = [&](const Tensor& out, Tensor& dout) {
            double acc = 0.0;
            const double gscale = 2.0 / static_cast<double>(out.numel());
            for (int64_t j = 0; j < out.numel(); ++j) {
                const double d = static_cast<double>(out[j]) - static_cast<double>(x0b[j]);
                acc += d * d;
                dout[j] = static_cast<scalar>(gscale * d);
            }
            return acc / static_cast<double>(out.numel());
        };
        GradientBundle gb = dae.loss_and_grad(x1, {}, loss_fn, &rng);
        bool clipped = false;
        const double gnorm = clip_gradients(gb.grad, cfg.grad_clip, clipped);
        adamw_update(dae.params(), gb.grad, opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                     cfg.weight_decay);
        st.skipped_updates = opt.skipped;
        st.ledger.record(1, gb.loss);
        st.log.push_back({update, 1.0, gb.loss, gb.loss, 0.0, gnorm, clipped});
    }
    finish_running_stats(st);
    return st;
}

TrainState train_daed(const TrainConfig& cfg, const NoiseSchedule& tail, Unet& dae, Unet& eps_net,
                      const ImageBatch& dataset, Rng& rng, double beta1, const StepMap& gen_map) {
    cfg.validate();
    if (!(beta1 > 0.0) || !(beta1 < 1.0)) throw std::invalid_argument("train_daed: beta1 must lie in (0, 1)");
    if (dataset.batch() < 1) throw std::invalid_argument("train_daed: dataset is empty");
    if (dae.kind() != NetKind::dae || eps_net.kind() != NetKind::epsilon)
        throw std::invalid_argument("train_daed: wrong network kinds");

    StepMap map = gen_map;
    if (map.denom <= 0) map = StepMap{0, tail.steps()};
    const StepSampler sampler = make_sampler(cfg, tail);
    AdamWState opt_dae(static_cast<size_t>(dae.param_count()));
    AdamWState opt_gen(static_cast<size_t>(eps_net.param_count()));
    TrainState st{LossLedger(tail.steps()), {}, 0, 0.0, 0.0};
    const int64_t per = dataset.pixels_per_image();
    const double sig_coef = std::sqrt(1.0 - beta1);
    const double noise_coef = std::sqrt(beta1);

    int64_t next_snapshot = 1;
    for (int64_t update = 1; update <= cfg.total_steps; ++update) {
        Tensor x0b = draw_batch(dataset, cfg.batch, rng);
        // x1 ~ q(x1|x0) with fresh noise each update
        Tensor x1 = axpy_like(sig_coef, x0b, noise_coef, gaussian(rng, x0b.shape()));

        // --- denoiser step (parameters phi only) ---
        auto dae_loss = [&](const Tensor& out, Tensor& dout) {
            double acc = 0.0;
            const double gscale = 2.0 / static_cast<double>(out.numel());
            for (int64_t j = 0; j < out.numel(); ++j) {
                const double d = static_cast<double>(out[j]) - static_cast<double>(x0b[j]);
                acc += d * d;
                dout[j] = static_cast<scalar>(gscale * d);
            }
            return acc / static_cast<double>(out.numel());
        };
        GradientBundle gb_dae = dae.loss_and_grad(x1, {}, dae_loss, &rng);
        bool clipped_dae = false;
        const double gnorm_dae = clip_gradients(gb_dae.grad, cfg.grad_clip, clipped_dae);
        adamw_update(dae.params(), gb_dae.grad, opt_dae, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_eps, cfg.weight_decay);

        // --- generator step on the tail process (parameters theta only) ---
        std::vector<int> ts(static_cast<size_t>(cfg.batch));
        std::vector<double> t_norm(static_cast<size_t>(cfg.batch));
        double t_sum = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            ts[static_cast<size_t>(b)] = sampler.sample(rng);
            t_norm[static_cast<size_t>(b)] = map.norm(ts[static_cast<size_t>(b)]);
            t_sum += ts[static_cast<size_t>(b)];
        }
        Tensor eps = gaussian(rng, x1.shape());
        Tensor xt(x1.shape());
        for (int b = 0; b < cfg.batch; ++b) {
            const int t = ts[static_cast<size_t>(b)];
            const scalar sa = static_cast<scalar>(std::sqrt(tail.alpha_bar(t)));
            const scalar sn = static_cast<scalar>(std::sqrt(tail.one_minus_alpha_bar(t)));
            for (int64_t i = 0; i < per; ++i) {
                const int64_t j = static_cast<int64_t>(b) * per + i;
                xt[j] = sa * x1[j] + sn * eps[j];
            }
        }
        std::vector<double> per_sample(static_cast<size_t>(cfg.batch), 0.0);
        ImageBatch x1_view{x1, dataset.provenance};
        auto gen_loss = [&](const Tensor& pred, Tensor& dpred) {
            if (cfg.objective == TrainConfig::Objective::simple)
                return simple_objective(pred, eps, dpred, per_sample);
            // x1 is continuous, so the tail's t=1 term is the Gaussian KL
            // like every other step; vlb_objective only needs t >= 2 paths
            // when data sits on the pixel grid, which x1 does not.
            return vlb_objective_tail(tail, cfg.kernel, pred, x1_view, xt, ts, dpred, per_sample);
        };
        GradientBundle gb_gen = eps_net.loss_and_grad(xt, t_norm, gen_loss, &rng);
        bool clipped_gen = false;
        const double gnorm_gen = clip_gradients(gb_gen.grad, cfg.grad_clip, clipped_gen);
        const int64_t before = opt_gen.skipped;
        adamw_update(eps_net.params(), gb_gen.grad, opt_gen, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_eps, cfg.weight_decay);
        st.skipped_updates = opt_dae.skipped + opt_gen.skipped;
        if (opt_gen.skipped == before) {
            for (int b = 0; b < cfg.batch; ++b)
                st.ledger.record(ts[static_cast<size_t>(b)], per_sample[static_cast<size_t>(b)]);
        }

        st.log.push_back({update, t_sum / cfg.batch, gb_dae.loss + gb_gen.loss, gb_dae.loss, gb_gen.loss,
                          gnorm_dae + gnorm_gen, clipped_dae || clipped_gen});
        if (update * kSnapshots >= next_snapshot * cfg.total_steps) {
            st.ledger.snapshot(static_cast<double>(update) / static_cast<double>(cfg.total_steps));
            ++next_snapshot;
        }
    }
    finish_running_stats(st);
    return st;
}

} // namespace daed
