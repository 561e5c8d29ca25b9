#include "daed/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace daed {

namespace {

constexpr double kMassFloor = 1e-12;
constexpr double kGridStep = 1.0 / 255.0;

// Standard normal CDF; lower or upper tail picked for stability.
double phi_lower(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
double phi_upper(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

double normal_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

struct BinEdges {
    double lo, hi;
    bool lo_open, hi_open;
};

BinEdges bin_edges(double x) {
    BinEdges e{};
    e.hi_open = x >= 1.0;
    e.lo_open = x <= -1.0;
    e.hi = e.hi_open ? 0.0 : x + kGridStep;
    e.lo = e.lo_open ? 0.0 : x - kGridStep;
    return e;
}

double bin_mass(const BinEdges& e, double mean, double sigma) {
    const double zhi = e.hi_open ? 0.0 : (e.hi - mean) / sigma;
    const double zlo = e.lo_open ? 0.0 : (e.lo - mean) / sigma;
    if (e.hi_open && e.lo_open) return 1.0;
    if (e.hi_open) return phi_upper(zlo);
    if (e.lo_open) return phi_lower(zhi);
    // both finite: subtract in whichever tail keeps precision
    if (zlo >= 0.0) return phi_upper(zlo) - phi_upper(zhi);
    if (zhi <= 0.0) return phi_lower(zhi) - phi_lower(zlo);
    return phi_lower(zhi) - phi_lower(zlo);
}

void check_t(const NoiseSchedule& s, int t) {
    if (t < 1 || t > s.steps()) throw std::invalid_argument("diffusion: step out of range [1, T]");
}

std::vector<double> uniform_t_norm(int64_t bsz, const StepMap& map, int t) {
    return std::vector<double>(static_cast<size_t>(bsz), map.norm(t));
}

std::vector<double> net_times(const Unet& net, const StepMap& map, int t, int64_t bsz) {
    if (net.kind() == NetKind::dae) return {};
    return uniform_t_norm(bsz, map, t);
}

} // namespace

double reverse_sigma2(const NoiseSchedule& s, const ReverseKernelConfig& cfg, int t) {
    check_t(s, t);
    if (t == 1) return s.beta(1);
    return cfg.variance_mode == ReverseKernelConfig::VarianceMode::beta ? s.beta(t) : s.beta_tilde(t);
}

ImageBatch forward_marginal(const NoiseSchedule& s, const ImageBatch& x0, int t, const Tensor& eps) {
    check_t(s, t);
    if (!x0.tensor.same_shape(eps)) throw std::invalid_argument("forward_marginal: eps shape mismatch");
    Tensor xt = axpy_like(std::sqrt(s.alpha_bar(t)), x0.tensor, std::sqrt(s.one_minus_alpha_bar(t)), eps);
    return {std::move(xt), x0.provenance};
}

PosteriorParams forward_posterior(const NoiseSchedule& s, const ImageBatch& x0, const ImageBatch& xt,
                                  int t) {
    check_t(s, t);
    if (t < 2)
        throw std::invalid_argument(
            "forward_posterior: t = 1 has no Gaussian posterior; use the discretized likelihood (L0) path");
    if (!x0.tensor.same_shape(xt.tensor)) throw std::invalid_argument("forward_posterior: shape mismatch");
    const double denom = s.one_minus_alpha_bar(t);
    const double a = std::sqrt(s.alpha_bar(t - 1)) * s.beta(t) / denom;
    const double b = std::sqrt(s.alpha(t)) * s.one_minus_alpha_bar(t - 1) / denom;
    return {axpy_like(a, x0.tensor, b, xt.tensor), s.beta_tilde(t)};
}

Tensor reverse_mean(const NoiseSchedule& s, const Tensor& xt, const Tensor& eps_pred, int t) {
    check_t(s, t);
    const double c1 = 1.0 / std::sqrt(s.alpha(t));
    const double c2 = s.beta(t) / (std::sqrt(s.one_minus_alpha_bar(t)) * std::sqrt(s.alpha(t)));
    return axpy_like(c1, xt, -c2, eps_pred);
}

ImageBatch reverse_step(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                        const ImageBatch& xt, int t, Rng& rng, const StepMap& map) {
    check_t(s, t);
    const auto times = net_times(net, map, t, xt.batch());
    Tensor pred = net.forward(xt.tensor, times);
    Tensor mu = reverse_mean(s, xt.tensor, pred, t);
    if (t == 1) return {std::move(mu), xt.provenance};
    const double sigma = std::sqrt(reverse_sigma2(s, cfg, t));
    Tensor z = gaussian(rng, mu.shape());
    return {axpy_like(1.0, mu, sigma, z), xt.provenance};
}

ImageBatch reverse_step(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                        const ImageBatch& xt, int t, Rng& rng) {
    return reverse_step(s, cfg, net, xt, t, rng, StepMap{0, s.steps()});
}

ImageBatch ancestral_sample(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                            const Shape& shape, Rng& rng, const StepMap& map, bool clamp_final) {
    if (shape.size() != 4) throw std::invalid_argument("ancestral_sample: shape must be (B, C, H, W)");
    ImageBatch x{gaussian(rng, shape), "sampled"};
    for (int t = s.steps(); t >= 1; --t) x = reverse_step(s, cfg, net, x, t, rng, map);
    if (clamp_final) x.tensor = clamp(x.tensor, -1.0, 1.0);
    return x;
}

ImageBatch ancestral_sample(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                            const Shape& shape, Rng& rng) {
    return ancestral_sample(s, cfg, net, shape, rng, StepMap{0, s.steps()});
}

ImageBatch denoise_from(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                        const ImageBatch& xt, int t, Rng& rng, const StepMap& map) {
    check_t(s, t);
    ImageBatch x = xt;
    for (int step = t; step >= 1; --step) x = reverse_step(s, cfg, net, x, step, rng, map);
    x.tensor = clamp(x.tensor, -1.0, 1.0);
    return x;
}

double bin_log_mass(double x, double mean, double sigma) {
    const double m = bin_mass(bin_edges(x), mean, sigma);
    return std::log(std::max(m, kMassFloor));
}

double bin_log_mass_dmean(double x, double mean, double sigma) {
    const BinEdges e = bin_edges(x);
    const double m = std::max(bin_mass(e, mean, sigma), kMassFloor);
    double d = 0.0;
    if (!e.lo_open) d += normal_pdf((e.lo - mean) / sigma) / sigma;
    if (!e.hi_open) d -= normal_pdf((e.hi - mean) / sigma) / sigma;
    return d / m;
}

Tensor discretized_gaussian_ll(const ImageBatch& x0, const Tensor& mean, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("discretized_gaussian_ll: sigma must be > 0");
    if (!x0.tensor.same_shape(mean)) throw std::invalid_argument("discretized_gaussian_ll: shape mismatch");
    const int64_t bsz = x0.batch();
    const int64_t per = x0.pixels_per_image();
    Tensor out({bsz});
    for (int64_t b = 0; b < bsz; ++b) {
        double acc = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            const int64_t j = b * per + i;
            acc += bin_log_mass(static_cast<double>(x0.tensor[j]), static_cast<double>(mean[j]), sigma);
        }
        out[b] = static_cast<scalar>(acc);
    }
    return out;
}

namespace {

// KL between two isotropic Gaussians, per pixel.
double kl_gauss(double mu1, double mu2, double var1, double var2) {
    const double d = mu1 - mu2;
    return 0.5 * (std::log(var2 / var1) + (var1 + d * d) / var2 - 1.0);
}

} // namespace

std::vector<double> terminal_kl(const NoiseSchedule& s, const ImageBatch& x0) {
    const int T = s.steps();
    const double var = s.one_minus_alpha_bar(T);
    const double sig_coef = std::sqrt(s.alpha_bar(T));
    const double log_var = std::log(var);
    const int64_t bsz = x0.batch();
    const int64_t per = x0.pixels_per_image();
    std::vector<double> out(static_cast<size_t>(bsz), 0.0);
    for (int64_t b = 0; b < bsz; ++b) {
        double acc = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            const double mu = sig_coef * static_cast<double>(x0.tensor[b * per + i]);
            acc += 0.5 * (var + mu * mu - 1.0 - log_var);
        }
        out[static_cast<size_t>(b)] = acc;
    }
    return out;
}

double VlbTerms::total() const {
    double acc = L0 + LT;
    for (double v : kl) acc += v;
    return acc;
}

VlbTerms vlb_terms(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                   const ImageBatch& x0, Rng& rng, const StepMap& map) {
    const int T = s.steps();
    const int64_t bsz = x0.batch();
    VlbTerms terms;
    terms.kl.assign(static_cast<size_t>(T - 1), 0.0);

    {
        Tensor eps = gaussian(rng, x0.tensor.shape());
        ImageBatch x1 = forward_marginal(s, x0, 1, eps);
        Tensor pred = net.forward(x1.tensor, net_times(net, map, 1, bsz));
        Tensor mu = reverse_mean(s, x1.tensor, pred, 1);
        const double sigma1 = std::sqrt(reverse_sigma2(s, cfg, 1));
        Tensor ll = discretized_gaussian_ll(x0, mu, sigma1);
        terms.L0 = -reduce_scalar(ll, ReduceOp::mean);
    }

    for (int t = 2; t <= T; ++t) {
        Tensor eps = gaussian(rng, x0.tensor.shape());
        ImageBatch xt = forward_marginal(s, x0, t, eps);
        Tensor pred = net.forward(xt.tensor, net_times(net, map, t, bsz));
        Tensor mu_theta = reverse_mean(s, xt.tensor, pred, t);
        PosteriorParams post = forward_posterior(s, x0, xt, t);
        const double var2 = reverse_sigma2(s, cfg, t);
        double acc = 0.0;
        for (int64_t j = 0; j < mu_theta.numel(); ++j)
            acc += kl_gauss(static_cast<double>(post.mean[j]), static_cast<double>(mu_theta[j]),
                            post.var, var2);
        terms.kl[static_cast<size_t>(t - 2)] = acc / static_cast<double>(bsz);
    }

    const auto lt = terminal_kl(s, x0);
    double acc = 0.0;
    for (double v : lt) acc += v;
    terms.LT = acc / static_cast<double>(bsz);
    return terms;
}

VlbTerms vlb_terms(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                   const ImageBatch& x0, Rng& rng) {
    return vlb_terms(s, cfg, net, x0, rng, StepMap{0, s.steps()});
}

double loss_simple(const NoiseSchedule& s, const Unet& net, const ImageBatch& x0, int t, Rng& rng,
                   const StepMap& map) {
    check_t(s, t);
    Tensor eps = gaussian(rng, x0.tensor.shape());
    ImageBatch xt = forward_marginal(s, x0, t, eps);
    Tensor pred = net.forward(xt.tensor, net_times(net, map, t, x0.batch()));
    Tensor diff = sub(eps, pred);
    return reduce_scalar(diff, ReduceOp::mean_sq);
}

double loss_simple(const NoiseSchedule& s, const Unet& net, const ImageBatch& x0, int t, Rng& rng) {
    return loss_simple(s, net, x0, t, rng, StepMap{0, s.steps()});
}

double weighted_prefactor(const NoiseSchedule& s, const ReverseKernelConfig& cfg, int t) {
    const double b = s.beta(t);
    return b * b / (2.0 * reverse_sigma2(s, cfg, t) * s.alpha(t) * s.one_minus_alpha_bar(t));
}

double loss_weighted(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                     const ImageBatch& x0, int t, Rng& rng, const StepMap& map) {
    return weighted_prefactor(s, cfg, t) * loss_simple(s, net, x0, t, rng, map);
}

double loss_weighted(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                     const ImageBatch& x0, int t, Rng& rng) {
    return loss_weighted(s, cfg, net, x0, t, rng, StepMap{0, s.steps()});
}

double simple_objective(const Tensor& pred, const Tensor& eps, Tensor& dpred,
                        std::span<double> per_sample) {
    const int64_t bsz = pred.extent(0);
    const int64_t per = pred.numel() / bsz;
    double total = 0.0;
    const double gscale = 2.0 / static_cast<double>(per * bsz);
    for (int64_t b = 0; b < bsz; ++b) {
        double acc = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            const int64_t j = b * per + i;
            const double d = static_cast<double>(pred[j]) - static_cast<double>(eps[j]);
            acc += d * d;
            dpred[j] = static_cast<scalar>(gscale * d);
        }
        const double msq = acc / static_cast<double>(per);
        if (!per_sample.empty()) per_sample[static_cast<size_t>(b)] = msq;
        total += msq;
    }
    return total / static_cast<double>(bsz);
}

namespace {

double vlb_objective_impl(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Tensor& pred,
                          const ImageBatch& x0, const Tensor& xt, std::span<const int> t_steps,
                          Tensor& dpred, std::span<double> per_sample, bool discretized_first_step) {
    const int64_t bsz = pred.extent(0);
    const int64_t per = pred.numel() / bsz;
    const double inv_b = 1.0 / static_cast<double>(bsz);
    double total = 0.0;
    for (int64_t b = 0; b < bsz; ++b) {
        const int t = t_steps[static_cast<size_t>(b)];
        const double c1 = 1.0 / std::sqrt(s.alpha(t));
        const double c2 = s.beta(t) / (std::sqrt(s.one_minus_alpha_bar(t)) * std::sqrt(s.alpha(t)));
        double term = 0.0;
        if (t == 1 && discretized_first_step) {
            const double sigma1 = std::sqrt(reverse_sigma2(s, cfg, 1));
            for (int64_t i = 0; i < per; ++i) {
                const int64_t j = b * per + i;
                const double mu = c1 * static_cast<double>(xt[j]) - c2 * static_cast<double>(pred[j]);
                const double xv = static_cast<double>(x0.tensor[j]);
                term -= bin_log_mass(xv, mu, sigma1);
                dpred[j] = static_cast<scalar>(inv_b * c2 * bin_log_mass_dmean(xv, mu, sigma1));
            }
        } else if (t == 1) {
            const double var = reverse_sigma2(s, cfg, 1);
            const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi * var);
            for (int64_t i = 0; i < per; ++i) {
                const int64_t j = b * per + i;
                const double mu = c1 * static_cast<double>(xt[j]) - c2 * static_cast<double>(pred[j]);
                const double d = static_cast<double>(x0.tensor[j]) - mu;
                term += log_norm + 0.5 * d * d / var;
                dpred[j] = static_cast<scalar>(inv_b * c2 * d / var);
            }
        } else {
            const double denom = s.one_minus_alpha_bar(t);
            const double pa = std::sqrt(s.alpha_bar(t - 1)) * s.beta(t) / denom;
            const double pb = std::sqrt(s.alpha(t)) * s.one_minus_alpha_bar(t - 1) / denom;
            const double var1 = s.beta_tilde(t);
            const double var2 = reverse_sigma2(s, cfg, t);
            const double const_part = 0.5 * (std::log(var2 / var1) + var1 / var2 - 1.0);
            for (int64_t i = 0; i < per; ++i) {
                const int64_t j = b * per + i;
                const double mu_t = pa * static_cast<double>(x0.tensor[j]) + pb * static_cast<double>(xt[j]);
                const double mu_p = c1 * static_cast<double>(xt[j]) - c2 * static_cast<double>(pred[j]);
                const double d = mu_t - mu_p;
                term += const_part + 0.5 * d * d / var2;
                // d term / d pred = (mu_p - mu_t)/var2 * (-c2)
                dpred[j] = static_cast<scalar>(inv_b * c2 * d / var2);
            }
        }
        if (!per_sample.empty()) per_sample[static_cast<size_t>(b)] = term;
        total += term;
    }
    return total * inv_b;
}

} // namespace

double vlb_objective(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Tensor& pred,
                     const ImageBatch& x0, const Tensor& xt, std::span<const int> t_steps,
                     Tensor& dpred, std::span<double> per_sample) {
    return vlb_objective_impl(s, cfg, pred, x0, xt, t_steps, dpred, per_sample, true);
}

double vlb_objective_tail(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Tensor& pred,
                          const ImageBatch& x1, const Tensor& xt, std::span<const int> t_steps,
                          Tensor& dpred, std::span<double> per_sample) {
    return vlb_objective_impl(s, cfg, pred, x1, xt, t_steps, dpred, per_sample, false);
}

} // namespace daed
