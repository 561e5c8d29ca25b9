#pragma once

#include <span>
#include <vector>

#include "daed/image.hpp"
#include "daed/network.hpp"
#include "daed/rng.hpp"
#include "daed/schedule.hpp"

namespace daed {

// Reverse kernel N(mu_theta, sigma_t^2 I) with a fixed, schedule-derived
// variance. The mean is always derived from the epsilon parameterization.
struct ReverseKernelConfig {
    enum class VarianceMode { beta, beta_tilde };
    VarianceMode variance_mode = VarianceMode::beta_tilde;
};

// sigma_t^2 for the configured mode. At t = 1 both modes fall back to
// beta_1 since beta_tilde is undefined there and the variance must stay
// positive.
double reverse_sigma2(const NoiseSchedule& s, const ReverseKernelConfig& cfg, int t);

// Mapping from a (sub)chain step to the time value a network was trained
// on: t_net = (offset + t) / denom. Plain DDGMs use {0, T}; DAED tails built
// by splitting keep the original offsets.
struct StepMap {
    int offset = 0;
    int denom = 1;
    double norm(int t) const { return static_cast<double>(offset + t) / static_cast<double>(denom); }
};

// q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
ImageBatch forward_marginal(const NoiseSchedule& s, const ImageBatch& x0, int t, const Tensor& eps);

struct PosteriorParams {
    Tensor mean;
    double var = 0.0; // beta_tilde_t
};

// q(x_{t-1} | x_t, x_0) for t >= 2; t = 1 belongs to the likelihood term.
PosteriorParams forward_posterior(const NoiseSchedule& s, const ImageBatch& x0, const ImageBatch& xt,
                                  int t);

// Mean of p(x_{t-1} | x_t) from the epsilon prediction.
Tensor reverse_mean(const NoiseSchedule& s, const Tensor& xt, const Tensor& eps_pred, int t);

// One ancestral step; adds sigma_t z for t >= 2 and none at t = 1.
ImageBatch reverse_step(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                        const ImageBatch& xt, int t, Rng& rng, const StepMap& map);
ImageBatch reverse_step(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                        const ImageBatch& xt, int t, Rng& rng);

// Full chain from x_T ~ N(0, I). The final x0 estimate is clamped to
// [-1, 1] unless clamp_final is false (DAED tails keep x1 unclamped).
ImageBatch ancestral_sample(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                            const Shape& shape, Rng& rng, const StepMap& map, bool clamp_final = true);
ImageBatch ancestral_sample(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                            const Shape& shape, Rng& rng);

// Runs the backward chain from a given x_t at step t down to the x0
// estimate (clamped).
ImageBatch denoise_from(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                        const ImageBatch& xt, int t, Rng& rng, const StepMap& map);

// log p(x0 | x1) under the discretized Gaussian of the 256-level grid;
// per-image sums in nats. Bin edges are x +- 1/255, open at +-1, with the
// log floored at log(1e-12).
Tensor discretized_gaussian_ll(const ImageBatch& x0, const Tensor& mean, double sigma);

// log mass of one pixel bin and its derivative w.r.t. the mean.
double bin_log_mass(double x, double mean, double sigma);
double bin_log_mass_dmean(double x, double mean, double sigma);

struct VlbTerms {
    double L0 = 0.0;             // -E[log p(x0|x1)], nats per image
    std::vector<double> kl;      // kl[i] = L_{t-1} for t = i + 2
    double LT = 0.0;             // KL(q(x_T|x0) || N(0, I))

    double total() const;
};

// Single-sample Monte-Carlo estimate of every VLB term, batch means.
VlbTerms vlb_terms(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                   const ImageBatch& x0, Rng& rng, const StepMap& map);
VlbTerms vlb_terms(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                   const ImageBatch& x0, Rng& rng);

// Eq-style training losses (pixel-and-batch means, single noise draw).
double loss_simple(const NoiseSchedule& s, const Unet& net, const ImageBatch& x0, int t, Rng& rng,
                   const StepMap& map);
double loss_simple(const NoiseSchedule& s, const Unet& net, const ImageBatch& x0, int t, Rng& rng);
double loss_weighted(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                     const ImageBatch& x0, int t, Rng& rng, const StepMap& map);
double loss_weighted(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Unet& net,
                     const ImageBatch& x0, int t, Rng& rng);

// Weight in front of the simple loss in the per-step weighted objective.
double weighted_prefactor(const NoiseSchedule& s, const ReverseKernelConfig& cfg, int t);

// ---- batched objective kernels used by the training loop -------------------

// Squared-error objective on a batch with per-sample noise targets.
// Returns the batch-mean loss and writes d(loss)/d(pred); per_sample gets
// each sample's pixel-mean squared error.
double simple_objective(const Tensor& pred, const Tensor& eps, Tensor& dpred,
                        std::span<double> per_sample);

// Per-sample VLB term (KL for t >= 2, -log p(x0|x1) for t = 1), nats per
// image; batch-mean loss and gradient w.r.t. the epsilon prediction.
double vlb_objective(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Tensor& pred,
                     const ImageBatch& x0, const Tensor& xt, std::span<const int> t_steps,
                     Tensor& dpred, std::span<double> per_sample);

// Tail variant for DAED generators: the data level x1 is continuous, so
// the first step contributes the Gaussian negative log-density instead of
// a discretized bin mass.
double vlb_objective_tail(const NoiseSchedule& s, const ReverseKernelConfig& cfg, const Tensor& pred,
                          const ImageBatch& x1, const Tensor& xt, std::span<const int> t_steps,
                          Tensor& dpred, std::span<double> per_sample);

// Closed-form KL(q(x_T | x0) || N(0, I)) per image.
std::vector<double> terminal_kl(const NoiseSchedule& s, const ImageBatch& x0);

} // namespace daed
