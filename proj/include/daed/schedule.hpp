#pragma once

#include <cstdint>
#include <vector>

#include "daed/tensor.hpp"

namespace daed {

struct ImageBatch;

// Variance schedule of a T-step diffusion plus everything derived from it.
// Steps are 1-based in the API, matching the usual beta_1..beta_T notation;
// storage is 0-based. alpha_bar(0) is defined as 1 and
// one_minus_alpha_bar is kept as its own recursion so tiny noise levels
// keep full precision (one_minus_alpha_bar(1) == beta(1) exactly).
class NoiseSchedule {
public:
    enum class Kind { linear, cosine, custom };

    static NoiseSchedule linear(int steps, double beta_start, double beta_end);
    static NoiseSchedule cosine(int steps, double offset = 0.008, double clip = 0.999);
    static NoiseSchedule custom(std::vector<double> betas);

    int steps() const { return T_; }
    Kind kind() const { return kind_; }
    double cosine_offset() const { return cosine_offset_; }

    double beta(int t) const { return beta_[index(t)]; }
    double alpha(int t) const { return alpha_[index(t)]; }
    double alpha_bar(int t) const;           // t in [0, T], alpha_bar(0) == 1
    double one_minus_alpha_bar(int t) const; // t in [0, T]
    double beta_tilde(int t) const;          // t in [2, T]

    // log of the pixel-mean SNR for a signal with mean square x0_ms.
    double snr_mean(double x0_ms, int t) const;
    double log_snr_mean(double x0_ms, int t) const;

    uint64_t hash() const;

private:
    NoiseSchedule() = default;
    void derive();
    size_t index(int t) const;

    int T_ = 0;
    Kind kind_ = Kind::custom;
    double cosine_offset_ = 0.0;
    std::vector<double> beta_, alpha_, alpha_bar_, one_minus_alpha_bar_, beta_tilde_;
};

// Elementwise SNR of eq-style alpha_bar_t * x0^2 / (1 - alpha_bar_t).
Tensor snr(const NoiseSchedule& s, const ImageBatch& x0, int t);

// Mean over pixels and batch of the elementwise SNR.
double snr_batch_mean(const NoiseSchedule& s, const ImageBatch& x0, int t);

// Discrete derivative of the batch-mean log-SNR curve; entry i is
// log SNR(t=i+2) - log SNR(t=i+1). All entries are negative.
std::vector<double> log_snr_delta(const NoiseSchedule& s, const ImageBatch& x0);

struct SwitchPoint {
    int step = 0;
    bool clamped = false; // target below the curve; step clamped to T
};

// Smallest t whose mean log-SNR is <= target.
SwitchPoint step_at_log_snr(const NoiseSchedule& s, double x0_ms, double target);

} // namespace daed
