#include "daed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "daed/rng.hpp"

namespace daed {

double mae(const ImageBatch& a, const ImageBatch& b) {
    if (!a.tensor.same_shape(b.tensor)) throw std::invalid_argument("mae: shape mismatch");
    Tensor d = sub(a.tensor, b.tensor);
    return reduce_scalar(d, ReduceOp::mean_abs);
}

MetricReport mae_report(const ImageBatch& a, const ImageBatch& b) {
    if (!a.tensor.same_shape(b.tensor)) throw std::invalid_argument("mae: shape mismatch");
    MetricReport r;
    r.name = "mae";
    r.config_hash = "mae";
    const int64_t bsz = a.batch();
    const int64_t per = a.pixels_per_image();
    double total = 0.0;
    for (int64_t i = 0; i < bsz; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < per; ++j)
            acc += std::abs(static_cast<double>(a.tensor[i * per + j]) -
                            static_cast<double>(b.tensor[i * per + j]));
        acc /= static_cast<double>(per);
        r.per_image.push_back(acc);
        total += acc;
    }
    r.value = total / static_cast<double>(bsz);
    return r;
}

namespace {

// ------- MS-SSIM -------------------------------------------------------------

// Per-image luminance plane in [0, 1]: channel mean of (x+1)/2.
std::vector<double> luminance(const ImageBatch& im, int64_t index) {
    const int64_t c = im.channels(), h = im.height(), w = im.width();
    std::vector<double> out(static_cast<size_t>(h * w), 0.0);
    const scalar* base = im.tensor.data() + index * c * h * w;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < h * w; ++i) out[static_cast<size_t>(i)] += static_cast<double>(base[ch * h * w + i]);
    const double inv = 1.0 / static_cast<double>(c);
    for (auto& v : out) v = std::clamp((v * inv + 1.0) * 0.5, 0.0, 1.0);
    return out;
}

struct Plane {
    std::vector<double> v;
    int64_t h = 0, w = 0;
};

Plane downsample2(const Plane& p) {
    Plane q;
    q.h = p.h / 2;
    q.w = p.w / 2;
    q.v.resize(static_cast<size_t>(q.h * q.w));
    for (int64_t i = 0; i < q.h; ++i)
        for (int64_t j = 0; j < q.w; ++j)
            q.v[static_cast<size_t>(i * q.w + j)] =
                0.25 * (p.v[static_cast<size_t>((2 * i) * p.w + 2 * j)] +
                        p.v[static_cast<size_t>((2 * i) * p.w + 2 * j + 1)] +
                        p.v[static_cast<size_t>((2 * i + 1) * p.w + 2 * j)] +
                        p.v[static_cast<size_t>((2 * i + 1) * p.w + 2 * j + 1)]);
    return q;
}

std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> k(static_cast<size_t>(n));
    const double c = (n - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// "valid" separable filtering
Plane filter_valid(const Plane& p, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    Plane tmp;
    tmp.h = p.h;
    tmp.w = p.w - n + 1;
    tmp.v.resize(static_cast<size_t>(tmp.h * tmp.w));
    for (int64_t i = 0; i < p.h; ++i)
        for (int64_t j = 0; j < tmp.w; ++j) {
            double acc = 0.0;
            for (int t = 0; t < n; ++t) acc += k[static_cast<size_t>(t)] * p.v[static_cast<size_t>(i * p.w + j + t)];
            tmp.v[static_cast<size_t>(i * tmp.w + j)] = acc;
        }
    Plane out;
    out.h = p.h - n + 1;
    out.w = tmp.w;
    out.v.resize(static_cast<size_t>(out.h * out.w));
    for (int64_t i = 0; i < out.h; ++i)
        for (int64_t j = 0; j < out.w; ++j) {
            double acc = 0.0;
            for (int t = 0; t < n; ++t) acc += k[static_cast<size_t>(t)] * tmp.v[static_cast<size_t>((i + t) * tmp.w + j)];
            out.v[static_cast<size_t>(i * out.w + j)] = acc;
        }
    return out;
}

struct ScaleStats {
    double luminance = 0.0; // mean of l map
    double cs = 0.0;        // mean of contrast/structure map
};

ScaleStats ssim_scale(const Plane& a, const Plane& b, const std::vector<double>& k, double c1, double c2) {
    auto mul_p = [](const Plane& x, const Plane& y) {
        Plane z = x;
        for (size_t i = 0; i < z.v.size(); ++i) z.v[i] *= y.v[i];
        return z;
    };
    Plane mu_a = filter_valid(a, k);
    Plane mu_b = filter_valid(b, k);
    Plane saa = filter_valid(mul_p(a, a), k);
    Plane sbb = filter_valid(mul_p(b, b), k);
    Plane sab = filter_valid(mul_p(a, b), k);
    double l_acc = 0.0, cs_acc = 0.0;
    for (size_t i = 0; i < mu_a.v.size(); ++i) {
        const double ma = mu_a.v[i], mb = mu_b.v[i];
        const double va = saa.v[i] - ma * ma;
        const double vb = sbb.v[i] - mb * mb;
        const double cov = sab.v[i] - ma * mb;
        l_acc += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_acc += (2.0 * cov + c2) / (va + vb + c2);
    }
    const double n = static_cast<double>(mu_a.v.size());
    return {l_acc / n, cs_acc / n};
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// ------- symmetric eigen / matrix square root --------------------------------

// Cyclic Jacobi on a symmetric matrix; returns eigenvalues, fills
// eigenvectors as columns of v.
std::vector<double> jacobi_eigen(std::vector<double> m, int n, std::vector<double>& v) {
    v.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
    auto at = [&](std::vector<double>& a, int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(m, i, j) * at(m, i, j);
        if (off < 1e-24) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(m, p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (at(m, q, q) - at(m, p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = at(m, i, p), aiq = at(m, i, q);
                    at(m, i, p) = c * aip - s * aiq;
                    at(m, i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = at(m, p, i), aqi = at(m, q, i);
                    at(m, p, i) = c * api - s * aqi;
                    at(m, q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = at(v, i, p), viq = at(v, i, q);
                    at(v, i, p) = c * vip - s * viq;
                    at(v, i, q) = s * vip + c * viq;
                }
            }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = at(m, i, i);
    return eig;
}

std::vector<double> sym_sqrt(const std::vector<double>& m, int n) {
    std::vector<double> v;
    std::vector<double> eig = jacobi_eigen(m, n, v);
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < n; ++k) {
                const double lam = std::sqrt(std::max(eig[static_cast<size_t>(k)], 0.0));
                acc += v[static_cast<size_t>(i) * n + k] * lam * v[static_cast<size_t>(j) * n + k];
            }
            out[static_cast<size_t>(i) * n + j] = acc;
        }
    return out;
}

std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b, int n) {
    std::vector<double> c(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double av = a[static_cast<size_t>(i) * n + k];
            for (int j = 0; j < n; ++j) c[static_cast<size_t>(i) * n + j] += av * b[static_cast<size_t>(k) * n + j];
        }
    return c;
}

struct GaussianFit {
    std::vector<double> mean;
    std::vector<double> cov; // p x p
};

GaussianFit fit_gaussian(const std::vector<double>& z, int64_t n, int p) {
    GaussianFit g;
    g.mean.assign(static_cast<size_t>(p), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) g.mean[static_cast<size_t>(j)] += z[static_cast<size_t>(i) * p + j];
    for (auto& v : g.mean) v /= static_cast<double>(n);
    g.cov.assign(static_cast<size_t>(p) * p, 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) {
            const double dj = z[static_cast<size_t>(i) * p + j] - g.mean[static_cast<size_t>(j)];
            for (int k = j; k < p; ++k) {
                const double dk = z[static_cast<size_t>(i) * p + k] - g.mean[static_cast<size_t>(k)];
                g.cov[static_cast<size_t>(j) * p + k] += dj * dk;
            }
        }
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (int j = 0; j < p; ++j)
        for (int k = j; k < p; ++k) {
            g.cov[static_cast<size_t>(j) * p + k] *= inv;
            g.cov[static_cast<size_t>(k) * p + j] = g.cov[static_cast<size_t>(j) * p + k];
        }
    return g;
}

} // namespace

MetricReport ms_ssim(const ImageBatch& a, const ImageBatch& b, MsSsimOptions opts) {
    if (!a.tensor.same_shape(b.tensor)) throw std::invalid_argument("ms_ssim: shape mismatch");
    if (opts.scales < 1 || opts.weights.size() < static_cast<size_t>(opts.scales))
        throw std::invalid_argument("ms_ssim: need one weight per scale");

    const int64_t side = std::min(a.height(), a.width());
    int window = std::min<int64_t>(opts.window, side);
    int scales = 1;
    while (scales < opts.scales && (side >> scales) >= window) ++scales;

    std::vector<double> weights(opts.weights.begin(), opts.weights.begin() + scales);
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    for (auto& w : weights) w /= wsum;

    const std::vector<double> kernel = gaussian_window(window, opts.window_sigma);
    const double c1 = (opts.k1 * opts.luminance_range) * (opts.k1 * opts.luminance_range);
    const double c2 = (opts.k2 * opts.luminance_range) * (opts.k2 * opts.luminance_range);

    MetricReport r;
    r.name = "ms_ssim";
    {
        std::string cfg = "ms_ssim;scales=" + std::to_string(scales) + ";window=" + std::to_string(window) +
                          ";sigma=" + std::to_string(opts.window_sigma) + ";k1=" + std::to_string(opts.k1) +
                          ";k2=" + std::to_string(opts.k2) + ";weights=";
        for (double w : weights) cfg += std::to_string(w) + ",";
        char hex[17];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(cfg)));
        r.config_hash = hex;
    }

    const int64_t bsz = a.batch();
    double total = 0.0;
    for (int64_t idx = 0; idx < bsz; ++idx) {
        Plane pa{luminance(a, idx), a.height(), a.width()};
        Plane pb{luminance(b, idx), b.height(), b.width()};
        double value = 1.0;
        for (int sc = 0; sc < scales; ++sc) {
            ScaleStats st = ssim_scale(pa, pb, kernel, c1, c2);
            const double cs = std::max(st.cs, 0.0);
            if (sc == scales - 1) {
                const double l = std::max(st.luminance, 0.0);
                value *= std::pow(l, weights[static_cast<size_t>(sc)]) * std::pow(cs, weights[static_cast<size_t>(sc)]);
            } else {
                value *= std::pow(cs, weights[static_cast<size_t>(sc)]);
                pa = downsample2(pa);
                pb = downsample2(pb);
            }
        }
        r.per_image.push_back(value);
        total += value;
    }
    r.value = total / static_cast<double>(bsz);
    return r;
}

double gaussian_frechet(const ImageBatch& a_set, const ImageBatch& b_set, int proj_dim, uint64_t seed) {
    if (a_set.batch() < 2 || b_set.batch() < 2)
        throw std::invalid_argument("gaussian_frechet: need at least 2 images per set");
    if (a_set.pixels_per_image() != b_set.pixels_per_image())
        throw std::invalid_argument("gaussian_frechet: image dimensionality mismatch");
    const int64_t dim = a_set.pixels_per_image();
    if (proj_dim < 1 || proj_dim > dim)
        throw std::invalid_argument("gaussian_frechet: proj_dim must lie in [1, pixels]");

    // Seeded random projection with orthonormalized rows, so projected
    // distances are comparable across runs and sets.
    Rng rng(mix_seed(seed, 0x66726563686574ULL));
    std::vector<std::vector<double>> basis;
    basis.reserve(static_cast<size_t>(proj_dim));
    while (static_cast<int>(basis.size()) < proj_dim) {
        std::vector<double> row(static_cast<size_t>(dim));
        for (auto& v : row) v = rng.normal();
        for (const auto& prev : basis) {
            double dot = 0.0;
            for (int64_t i = 0; i < dim; ++i) dot += row[static_cast<size_t>(i)] * prev[static_cast<size_t>(i)];
            for (int64_t i = 0; i < dim; ++i) row[static_cast<size_t>(i)] -= dot * prev[static_cast<size_t>(i)];
        }
        double norm = 0.0;
        for (double v : row) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue; // rare degenerate draw; redraw
        for (auto& v : row) v /= norm;
        basis.push_back(std::move(row));
    }

    auto project = [&](const ImageBatch& set) {
        const int64_t n = set.batch();
        std::vector<double> z(static_cast<size_t>(n) * proj_dim, 0.0);
        for (int64_t i = 0; i < n; ++i) {
            const scalar* img = set.tensor.data() + i * dim;
            for (int j = 0; j < proj_dim; ++j) {
                double acc = 0.0;
                const auto& row = basis[static_cast<size_t>(j)];
                for (int64_t k = 0; k < dim; ++k) acc += row[static_cast<size_t>(k)] * static_cast<double>(img[k]);
                z[static_cast<size_t>(i) * proj_dim + j] = acc;
            }
        }
        return z;
    };

    const auto za = project(a_set);
    const auto zb = project(b_set);
    GaussianFit ga = fit_gaussian(za, a_set.batch(), proj_dim);
    GaussianFit gb = fit_gaussian(zb, b_set.batch(), proj_dim);

    const int p = proj_dim;
    for (int i = 0; i < p; ++i) {
        ga.cov[static_cast<size_t>(i) * p + i] += 1e-6;
        gb.cov[static_cast<size_t>(i) * p + i] += 1e-6;
    }

    double mean_term = 0.0;
    for (int i = 0; i < p; ++i) {
        const double d = ga.mean[static_cast<size_t>(i)] - gb.mean[static_cast<size_t>(i)];
        mean_term += d * d;
    }

    const auto sqrt_a = sym_sqrt(ga.cov, p);
    const auto inner = mat_mul(mat_mul(sqrt_a, gb.cov, p), sqrt_a, p);
    // Symmetrize against round-off before the second root.
    std::vector<double> sym(inner.size());
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
            sym[static_cast<size_t>(i) * p + j] =
                0.5 * (inner[static_cast<size_t>(i) * p + j] + inner[static_cast<size_t>(j) * p + i]);
    const auto cross = sym_sqrt(sym, p);

    double trace_term = 0.0;
    for (int i = 0; i < p; ++i)
        trace_term += ga.cov[static_cast<size_t>(i) * p + i] + gb.cov[static_cast<size_t>(i) * p + i] -
                      2.0 * cross[static_cast<size_t>(i) * p + i];

    // Clip the trace part at zero; round-off can push it slightly negative
    // for near-identical sets.
    return mean_term + std::max(trace_term, 0.0);
}

} // namespace daed
