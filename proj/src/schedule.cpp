#include "daed/schedule.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "daed/image.hpp"

namespace daed {

size_t NoiseSchedule::index(int t) const {
    if (t < 1 || t > T_) throw std::invalid_argument("schedule: step out of range [1, T]");
    return static_cast<size_t>(t - 1);
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alpha_bar_[index(t)];
}

double NoiseSchedule::one_minus_alpha_bar(int t) const {
    if (t == 0) return 0.0;
    return one_minus_alpha_bar_[index(t)];
}

double NoiseSchedule::beta_tilde(int t) const {
    if (t < 2) throw std::invalid_argument("schedule: beta_tilde is defined for t >= 2 only");
    return beta_tilde_[index(t)];
}

void NoiseSchedule::derive() {
    const size_t n = beta_.size();
    alpha_.resize(n);
    alpha_bar_.resize(n);
    one_minus_alpha_bar_.resize(n);
    beta_tilde_.resize(n);
    double abar = 1.0;
    double omab = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double b = beta_[i];
        if (!(b > 0.0) || b > 0.999)
            throw std::invalid_argument("schedule: beta values must lie in (0, 0.999]");
        alpha_[i] = 1.0 - b;
        // 1 - abar_t = (1 - abar_{t-1}) + abar_{t-1} * beta_t, exact at t = 1.
        omab = omab + abar * b;
        abar *= alpha_[i];
        alpha_bar_[i] = abar;
        one_minus_alpha_bar_[i] = omab;
        const double prev_omab = (i == 0) ? 0.0 : one_minus_alpha_bar_[i - 1];
        beta_tilde_[i] = prev_omab / omab * b;
        if (i > 0 && !(alpha_bar_[i] < alpha_bar_[i - 1]))
            throw std::invalid_argument("schedule: alpha_bar must be strictly decreasing");
    }
    if (!(alpha_bar_.back() > 0.0))
        throw std::invalid_argument("schedule: alpha_bar underflowed to zero");
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 2) throw std::invalid_argument("linear schedule: T must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end <= 0.999))
        throw std::invalid_argument("linear schedule: need 0 < beta_start <= beta_end <= 0.999");
    NoiseSchedule s;
    s.T_ = steps;
    s.kind_ = Kind::linear;
    s.beta_.resize(static_cast<size_t>(steps));
    for (int t = 1; t <= steps; ++t) {
        const double w = static_cast<double>(t - 1) / static_cast<double>(steps - 1);
        // std::lerp hits both endpoints exactly.
        s.beta_[static_cast<size_t>(t - 1)] = std::lerp(beta_start, beta_end, w);
    }
    s.derive();
    return s;
}

NoiseSchedule NoiseSchedule::cosine(int steps, double offset, double clip) {
    if (steps < 2) throw std::invalid_argument("cosine schedule: T must be >= 2");
    if (!(offset > 0.0)) throw std::invalid_argument("cosine schedule: offset must be > 0");
    NoiseSchedule s;
    s.T_ = steps;
    s.kind_ = Kind::cosine;
    s.cosine_offset_ = offset;
    s.beta_.resize(static_cast<size_t>(steps));
    auto f = [&](double t) {
        const double a = (t / steps + offset) / (1.0 + offset) * (std::numbers::pi / 2.0);
        const double c = std::cos(a);
        return c * c;
    };
    const double f0 = f(0.0);
    double prev = 1.0; // f(0)/f(0)
    for (int t = 1; t <= steps; ++t) {
        const double abar = f(static_cast<double>(t)) / f0;
        double b = 1.0 - abar / prev;
        if (b > clip) b = clip;
        s.beta_[static_cast<size_t>(t - 1)] = b;
        prev = abar;
    }
    s.derive();
    return s;
}

NoiseSchedule NoiseSchedule::custom(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("custom schedule: needs at least one beta");
    NoiseSchedule s;
    s.T_ = static_cast<int>(betas.size());
    s.kind_ = Kind::custom;
    s.beta_ = std::move(betas);
    s.derive();
    return s;
}

double NoiseSchedule::snr_mean(double x0_ms, int t) const {
    return alpha_bar(t) / one_minus_alpha_bar(t) * x0_ms;
}

double NoiseSchedule::log_snr_mean(double x0_ms, int t) const {
    if (!(x0_ms > 0.0)) throw std::invalid_argument("log_snr_mean: zero signal");
    return std::log(snr_mean(x0_ms, t));
}

uint64_t NoiseSchedule::hash() const {
    uint64_t h = 0xCBF29CE484222325ULL;
    auto feed = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xFF;
            h *= 0x100000001B3ULL;
        }
    };
    feed(static_cast<uint64_t>(T_));
    feed(static_cast<uint64_t>(kind_));
    for (double b : beta_) {
        uint64_t bits;
        std::memcpy(&bits, &b, sizeof(bits));
        feed(bits);
    }
    return h;
}

Tensor snr(const NoiseSchedule& s, const ImageBatch& x0, int t) {
    const double r = s.alpha_bar(t) / s.one_minus_alpha_bar(t);
    Tensor out(x0.tensor.shape());
    const scalar* xs = x0.tensor.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double v = static_cast<double>(xs[i]);
        out[i] = static_cast<scalar>(r * v * v);
    }
    return out;
}

double snr_batch_mean(const NoiseSchedule& s, const ImageBatch& x0, int t) {
    return s.snr_mean(x0.mean_square(), t);
}

std::vector<double> log_snr_delta(const NoiseSchedule& s, const ImageBatch& x0) {
    const double ms = x0.mean_square();
    if (!(ms > 0.0)) throw std::invalid_argument("log_snr_delta: zero signal");
    std::vector<double> out(static_cast<size_t>(s.steps() - 1));
    double prev = s.log_snr_mean(ms, 1);
    for (int t = 2; t <= s.steps(); ++t) {
        const double cur = s.log_snr_mean(ms, t);
        out[static_cast<size_t>(t - 2)] = cur - prev;
        prev = cur;
    }
    return out;
}

SwitchPoint step_at_log_snr(const NoiseSchedule& s, double x0_ms, double target) {
    if (!(x0_ms > 0.0)) throw std::invalid_argument("step_at_log_snr: zero signal");
    for (int t = 1; t <= s.steps(); ++t) {
        if (s.log_snr_mean(x0_ms, t) <= target) return {t, false};
    }
    return {s.steps(), true};
}

} // namespace daed
