#include "daed/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "daed/error.hpp"

namespace daed {

namespace {

// ---- dense kernels -------------------------------------------------------
// Row-major GEMM variants with a fixed per-element reduction order so runs
// are bit-reproducible regardless of thread count.

void gemm_nn(int m, int n, int k, const scalar* a, const scalar* b, scalar* c, bool accum) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        scalar* crow = c + static_cast<size_t>(i) * n;
        if (!accum) std::fill(crow, crow + n, scalar(0));
        for (int p = 0; p < k; ++p) {
            const scalar av = a[static_cast<size_t>(i) * k + p];
            const scalar* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] (+)= a^T * b with a stored [k,m].
void gemm_tn(int m, int n, int k, const scalar* a, const scalar* b, scalar* c, bool accum) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        scalar* crow = c + static_cast<size_t>(i) * n;
        if (!accum) std::fill(crow, crow + n, scalar(0));
        for (int p = 0; p < k; ++p) {
            const scalar av = a[static_cast<size_t>(p) * m + i];
            const scalar* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] (+)= a * b^T with b stored [n,k].
void gemm_nt(int m, int n, int k, const scalar* a, const scalar* b, scalar* c, bool accum) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const scalar* arow = a + static_cast<size_t>(i) * k;
        scalar* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const scalar* brow = b + static_cast<size_t>(j) * k;
            scalar acc = accum ? crow[j] : scalar(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

// ---- conv 3x3, pad 1, stride 1 --------------------------------------------

void im2col3x3(const scalar* x, int c_in, int h, int w, scalar* col) {
    // col is [c_in*9, h*w]
    for (int c = 0; c < c_in; ++c) {
        const scalar* plane = x + static_cast<size_t>(c) * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                scalar* row = col + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * h * w;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) {
                        std::fill(row + static_cast<size_t>(y) * w, row + static_cast<size_t>(y + 1) * w, scalar(0));
                        continue;
                    }
                    const scalar* src = plane + static_cast<size_t>(sy) * w;
                    scalar* dst = row + static_cast<size_t>(y) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - 1;
                        dst[xx] = (sx < 0 || sx >= w) ? scalar(0) : src[sx];
                    }
                }
            }
        }
    }
}

void col2im3x3(const scalar* col, int c_in, int h, int w, scalar* x) {
    std::fill(x, x + static_cast<size_t>(c_in) * h * w, scalar(0));
    for (int c = 0; c < c_in; ++c) {
        scalar* plane = x + static_cast<size_t>(c) * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const scalar* row = col + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * h * w;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    scalar* dst = plane + static_cast<size_t>(sy) * w;
                    const scalar* src = row + static_cast<size_t>(y) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - 1;
                        if (sx >= 0 && sx < w) dst[sx] += src[xx];
                    }
                }
            }
        }
    }
}

thread_local std::vector<scalar> tl_col;

scalar* col_buffer(size_t n) {
    if (tl_col.size() < n) tl_col.resize(n);
    return tl_col.data();
}

void conv3x3_forward(const scalar* x, int bsz, int c_in, int h, int w,
                     const scalar* weight, const scalar* bias, int c_out, scalar* y) {
    const int k9 = c_in * 9;
    const int hw = h * w;
#pragma omp parallel for schedule(static)
    for (int b = 0; b < bsz; ++b) {
        scalar* col = col_buffer(static_cast<size_t>(k9) * hw);
        im2col3x3(x + static_cast<size_t>(b) * c_in * hw, c_in, h, w, col);
        scalar* yb = y + static_cast<size_t>(b) * c_out * hw;
        for (int o = 0; o < c_out; ++o) {
            scalar* orow = yb + static_cast<size_t>(o) * hw;
            std::fill(orow, orow + hw, bias[o]);
            const scalar* wrow = weight + static_cast<size_t>(o) * k9;
            for (int p = 0; p < k9; ++p) {
                const scalar wv = wrow[p];
                const scalar* crow = col + static_cast<size_t>(p) * hw;
                for (int j = 0; j < hw; ++j) orow[j] += wv * crow[j];
            }
        }
    }
}

void conv3x3_backward_input(const scalar* dy, int bsz, int c_out, int h, int w,
                            const scalar* weight, int c_in, scalar* dx) {
    const int k9 = c_in * 9;
    const int hw = h * w;
#pragma omp parallel for schedule(static)
    for (int b = 0; b < bsz; ++b) {
        scalar* col = col_buffer(static_cast<size_t>(k9) * hw);
        // dcol = W^T * dy_b
        gemm_tn(k9, hw, c_out, weight, dy + static_cast<size_t>(b) * c_out * hw, col, false);
        col2im3x3(col, c_in, h, w, dx + static_cast<size_t>(b) * c_in * hw);
    }
}

// Serial over the batch: dw/db are shared accumulators.
void conv3x3_backward_params(const scalar* x, const scalar* dy, int bsz, int c_in, int c_out,
                             int h, int w, scalar* dw, scalar* db) {
    const int k9 = c_in * 9;
    const int hw = h * w;
    std::vector<scalar> col(static_cast<size_t>(k9) * hw);
    for (int b = 0; b < bsz; ++b) {
        im2col3x3(x + static_cast<size_t>(b) * c_in * hw, c_in, h, w, col.data());
        const scalar* dyb = dy + static_cast<size_t>(b) * c_out * hw;
        gemm_nt(c_out, k9, hw, dyb, col.data(), dw, true);
        for (int o = 0; o < c_out; ++o) {
            scalar acc = 0;
            const scalar* row = dyb + static_cast<size_t>(o) * hw;
            for (int j = 0; j < hw; ++j) acc += row[j];
            db[o] += acc;
        }
    }
}

// ---- misc layers ----------------------------------------------------------

Tensor avgpool2(const Tensor& x) {
    const int64_t bsz = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor y({bsz, c, h / 2, w / 2});
    const int64_t oh = h / 2, ow = w / 2;
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
        const scalar* xi = x.data() + bc * h * w;
        scalar* yo = y.data() + bc * oh * ow;
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j)
                yo[i * ow + j] = scalar(0.25) * (xi[(2 * i) * w + 2 * j] + xi[(2 * i) * w + 2 * j + 1] +
                                                 xi[(2 * i + 1) * w + 2 * j] + xi[(2 * i + 1) * w + 2 * j + 1]);
    }
    return y;
}

Tensor avgpool2_backward(const Tensor& dy, int64_t h, int64_t w) {
    const int64_t bsz = dy.extent(0), c = dy.extent(1), oh = dy.extent(2), ow = dy.extent(3);
    Tensor dx({bsz, c, h, w});
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
        const scalar* g = dy.data() + bc * oh * ow;
        scalar* o = dx.data() + bc * h * w;
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j) {
                const scalar v = scalar(0.25) * g[i * ow + j];
                o[(2 * i) * w + 2 * j] = v;
                o[(2 * i) * w + 2 * j + 1] = v;
                o[(2 * i + 1) * w + 2 * j] = v;
                o[(2 * i + 1) * w + 2 * j + 1] = v;
            }
    }
    return dx;
}

Tensor upsample2(const Tensor& x) {
    const int64_t bsz = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor y({bsz, c, h * 2, w * 2});
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
        const scalar* xi = x.data() + bc * h * w;
        scalar* yo = y.data() + bc * 4 * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const scalar v = xi[i * w + j];
                scalar* base = yo + (2 * i) * (2 * w) + 2 * j;
                base[0] = v;
                base[1] = v;
                base[2 * w] = v;
                base[2 * w + 1] = v;
            }
    }
    return y;
}

Tensor upsample2_backward(const Tensor& dy) {
    const int64_t bsz = dy.extent(0), c = dy.extent(1), oh = dy.extent(2), ow = dy.extent(3);
    Tensor dx({bsz, c, oh / 2, ow / 2});
    const int64_t h = oh / 2, w = ow / 2;
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
        const scalar* g = dy.data() + bc * oh * ow;
        scalar* o = dx.data() + bc * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const scalar* base = g + (2 * i) * ow + 2 * j;
                o[i * w + j] = base[0] + base[1] + base[ow] + base[ow + 1];
            }
    }
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const int64_t bsz = a.extent(0), ca = a.extent(1), cb = b.extent(1), h = a.extent(2), w = a.extent(3);
    Tensor y({bsz, ca + cb, h, w});
    const int64_t hw = h * w;
    for (int64_t i = 0; i < bsz; ++i) {
        std::memcpy(y.data() + i * (ca + cb) * hw, a.data() + i * ca * hw, sizeof(scalar) * ca * hw);
        std::memcpy(y.data() + i * (ca + cb) * hw + ca * hw, b.data() + i * cb * hw, sizeof(scalar) * cb * hw);
    }
    return y;
}

void split_channels(const Tensor& d, int64_t ca, Tensor& da, Tensor& db) {
    const int64_t bsz = d.extent(0), ct = d.extent(1), h = d.extent(2), w = d.extent(3);
    const int64_t cb = ct - ca;
    da = Tensor({bsz, ca, h, w});
    db = Tensor({bsz, cb, h, w});
    const int64_t hw = h * w;
    for (int64_t i = 0; i < bsz; ++i) {
        std::memcpy(da.data() + i * ca * hw, d.data() + i * ct * hw, sizeof(scalar) * ca * hw);
        std::memcpy(db.data() + i * cb * hw, d.data() + i * ct * hw + ca * hw, sizeof(scalar) * cb * hw);
    }
}

inline scalar sigmoid(scalar v) { return scalar(1) / (scalar(1) + std::exp(-v)); }

Tensor silu(const Tensor& x) {
    Tensor y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoid(x[i]);
    return y;
}

// dx given pre-activation x.
Tensor silu_backward(const Tensor& dy, const Tensor& x) {
    Tensor dx(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const scalar s = sigmoid(x[i]);
        dx[i] = dy[i] * s * (scalar(1) + x[i] * (scalar(1) - s));
    }
    return dx;
}

} // namespace

// ---- topology / layout -----------------------------------------------------

void Topology::validate() const {
    if (levels < 1) throw std::invalid_argument("topology: levels must be >= 1");
    if (static_cast<int>(channels.size()) != levels)
        throw std::invalid_argument("topology: channels list must have one entry per level");
    for (int c : channels)
        if (c < 1) throw std::invalid_argument("topology: channel counts must be >= 1");
    if (in_channels < 1) throw std::invalid_argument("topology: in_channels must be >= 1");
    if (kind == NetKind::epsilon && (time_dim < 2 || time_dim % 2 != 0))
        throw std::invalid_argument("topology: time_dim must be even and >= 2");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::invalid_argument("topology: dropout must lie in [0, 1)");
    if (attention) throw std::invalid_argument("topology: attention blocks are not supported");
}

namespace {

struct ConvRef {
    int64_t w = 0, b = 0;
    int in_c = 0, out_c = 0;
};

struct LinRef {
    int64_t w = 0, b = 0;
    int in_f = 0, out_f = 0;
};

struct Layout {
    std::vector<ConvRef> down_a, down_b, up_a, up_b;
    std::vector<LinRef> down_t, up_t;
    ConvRef out;
    LinRef tm1, tm2;
    int64_t total = 0;
    std::vector<ParamSegment> segments;
};

Layout make_layout(const Topology& t) {
    Layout ly;
    int64_t off = 0;
    auto seg = [&](const std::string& name, int64_t size) {
        ly.segments.push_back({name, off, size});
        int64_t at = off;
        off += size;
        return at;
    };
    auto conv = [&](const std::string& name, int in_c, int out_c) {
        ConvRef r;
        r.in_c = in_c;
        r.out_c = out_c;
        r.w = seg(name + ".w", static_cast<int64_t>(out_c) * in_c * 9);
        r.b = seg(name + ".b", out_c);
        return r;
    };
    auto lin = [&](const std::string& name, int in_f, int out_f) {
        LinRef r;
        r.in_f = in_f;
        r.out_f = out_f;
        r.w = seg(name + ".w", static_cast<int64_t>(out_f) * in_f);
        r.b = seg(name + ".b", out_f);
        return r;
    };

    const bool timed = t.kind == NetKind::epsilon;
    const int levels = t.levels;
    for (int l = 0; l < levels; ++l) {
        const int cin = (l == 0) ? t.in_channels : t.channels[static_cast<size_t>(l - 1)];
        const int ch = t.channels[static_cast<size_t>(l)];
        const std::string p = "down" + std::to_string(l);
        ly.down_a.push_back(conv(p + ".conv_a", cin, ch));
        if (timed) ly.down_t.push_back(lin(p + ".tproj", t.time_dim, ch));
        ly.down_b.push_back(conv(p + ".conv_b", ch, ch));
    }
    for (int l = levels - 2; l >= 0; --l) {
        const int ch = t.channels[static_cast<size_t>(l)];
        const int cat = t.channels[static_cast<size_t>(l + 1)] + ch;
        const std::string p = "up" + std::to_string(l);
        ly.up_a.push_back(conv(p + ".conv_a", cat, ch));
        if (timed) ly.up_t.push_back(lin(p + ".tproj", t.time_dim, ch));
        ly.up_b.push_back(conv(p + ".conv_b", ch, ch));
    }
    ly.out = conv("out", t.channels[0], t.in_channels);
    if (timed) {
        ly.tm1 = lin("tmlp.fc1", t.time_dim, t.time_dim);
        ly.tm2 = lin("tmlp.fc2", t.time_dim, t.time_dim);
    }
    ly.total = off;
    return ly;
}

void init_params(const Layout& ly, const Topology& t, Rng& rng, std::vector<scalar>& p) {
    p.assign(static_cast<size_t>(ly.total), scalar(0));
    auto fan_in_uniform = [&](int64_t w_off, int64_t n, int fan_in) {
        const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (int64_t i = 0; i < n; ++i)
            p[static_cast<size_t>(w_off + i)] = static_cast<scalar>((2.0 * rng.uniform() - 1.0) * k);
    };
    auto conv = [&](const ConvRef& r) { fan_in_uniform(r.w, static_cast<int64_t>(r.out_c) * r.in_c * 9, r.in_c * 9); };
    auto lin = [&](const LinRef& r) { fan_in_uniform(r.w, static_cast<int64_t>(r.out_f) * r.in_f, r.in_f); };

    const bool timed = t.kind == NetKind::epsilon;
    for (size_t l = 0; l < ly.down_a.size(); ++l) {
        conv(ly.down_a[l]);
        if (timed) lin(ly.down_t[l]);
        conv(ly.down_b[l]);
    }
    for (size_t l = 0; l < ly.up_a.size(); ++l) {
        conv(ly.up_a[l]);
        if (timed) lin(ly.up_t[l]);
        conv(ly.up_b[l]);
    }
    // final conv stays zero so the net predicts zero noise at start
    if (timed) {
        lin(ly.tm1);
        lin(ly.tm2);
    }
}

} // namespace

// ---- Unet -------------------------------------------------------------------

Unet::Unet(Topology topo, Rng& rng) : topo_(std::move(topo)) {
    topo_.validate();
    Layout ly = make_layout(topo_);
    segments_ = ly.segments;
    init_params(ly, topo_, rng, params_);
}

Unet::Unet(Topology topo, std::vector<scalar> params) : topo_(std::move(topo)), params_(std::move(params)) {
    topo_.validate();
    Layout ly = make_layout(topo_);
    segments_ = ly.segments;
    if (static_cast<int64_t>(params_.size()) != ly.total)
        throw std::invalid_argument("unet: parameter vector length does not match topology");
}

struct Unet::Stash {
    Tensor input;
    // time path
    Tensor emb0, e1_pre, e1, e;
    struct Block {
        Tensor in;    // conv_a input
        Tensor pre1;  // conv_a output (+ time bias)
        Tensor mid;   // conv_b input (post SiLU / dropout)
        Tensor pre2;  // conv_b output
        Tensor out;   // block output
        Tensor mask1, mask2; // dropout masks, empty when off
    };
    std::vector<Block> down; // per level
    std::vector<Block> up;   // processing order: level L-2 .. 0
    Tensor out_in;           // final conv input
};

namespace {

Tensor sinusoid_embedding(std::span<const double> t_norm, int dim) {
    const int bsz = static_cast<int>(t_norm.size());
    const int half = dim / 2;
    Tensor e({bsz, dim});
    for (int i = 0; i < bsz; ++i) {
        const double s = 1000.0 * t_norm[static_cast<size_t>(i)];
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
            e[static_cast<int64_t>(i) * dim + j] = static_cast<scalar>(std::sin(s * freq));
            e[static_cast<int64_t>(i) * dim + half + j] = static_cast<scalar>(std::cos(s * freq));
        }
    }
    return e;
}

Tensor linear_forward(const Tensor& x, const scalar* w, const scalar* b, int in_f, int out_f) {
    const int bsz = static_cast<int>(x.extent(0));
    Tensor y({bsz, out_f});
    gemm_nt(bsz, out_f, in_f, x.data(), w, y.data(), false);
    for (int i = 0; i < bsz; ++i)
        for (int o = 0; o < out_f; ++o) y[static_cast<int64_t>(i) * out_f + o] += b[o];
    return y;
}

// dW/db accumulate; returns dx.
Tensor linear_backward(const Tensor& dy, const Tensor& x, const scalar* w, scalar* dw, scalar* db,
                       int in_f, int out_f) {
    const int bsz = static_cast<int>(x.extent(0));
    gemm_tn(out_f, in_f, bsz, dy.data(), x.data(), dw, true);
    for (int i = 0; i < bsz; ++i)
        for (int o = 0; o < out_f; ++o) db[o] += dy[static_cast<int64_t>(i) * out_f + o];
    Tensor dx({bsz, in_f});
    gemm_nn(bsz, in_f, out_f, dy.data(), w, dx.data(), false);
    return dx;
}

void add_channel_bias(Tensor& x, const Tensor& bias_bc) {
    const int64_t bsz = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const scalar v = bias_bc[b * c + ch];
            scalar* p = x.data() + (b * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) p[j] += v;
        }
}

Tensor channel_bias_grad(const Tensor& d) {
    const int64_t bsz = d.extent(0), c = d.extent(1), hw = d.extent(2) * d.extent(3);
    Tensor g({bsz, c});
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const scalar* p = d.data() + (b * c + ch) * hw;
            scalar acc = 0;
            for (int64_t j = 0; j < hw; ++j) acc += p[j];
            g[b * c + ch] = acc;
        }
    return g;
}

Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
    Tensor m(shape);
    const scalar keep = static_cast<scalar>(1.0 / (1.0 - p));
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = (rng.uniform() < p) ? scalar(0) : keep;
    return m;
}

} // namespace

Tensor Unet::run(const Tensor& x, std::span<const double> t_norm, Stash* stash, Rng* dropout_rng) const {
    if (x.rank() != 4) throw std::invalid_argument("unet: input must be (B, C, H, W)");
    if (x.extent(1) != topo_.in_channels) throw std::invalid_argument("unet: channel count mismatch");
    const int64_t bsz = x.extent(0), h = x.extent(2), w = x.extent(3);
    const int64_t div = int64_t(1) << (topo_.levels - 1);
    if (h % div != 0 || w % div != 0)
        throw std::invalid_argument("unet: spatial size must be divisible by 2^(levels-1)");
    const bool timed = topo_.kind == NetKind::epsilon;
    if (timed && static_cast<int64_t>(t_norm.size()) != bsz)
        throw std::invalid_argument("unet: one normalized time per sample required");
    if (!timed && !t_norm.empty())
        throw std::invalid_argument("unet: dae nets take no time input");

    Layout ly = make_layout(topo_);
    const scalar* P = params_.data();
    const bool use_dropout = dropout_rng != nullptr && topo_.dropout > 0.0;

    Tensor e;
    Tensor emb0, e1_pre, e1;
    if (timed) {
        emb0 = sinusoid_embedding(t_norm, topo_.time_dim);
        e1_pre = linear_forward(emb0, P + ly.tm1.w, P + ly.tm1.b, ly.tm1.in_f, ly.tm1.out_f);
        e1 = silu(e1_pre);
        e = linear_forward(e1, P + ly.tm2.w, P + ly.tm2.b, ly.tm2.in_f, ly.tm2.out_f);
    }

    auto block = [&](const Tensor& in, const ConvRef& ca, const ConvRef& cb, const LinRef* tp,
                     Stash::Block* sb) {
        const int64_t bh = in.extent(2), bw = in.extent(3);
        Tensor pre1({bsz, ca.out_c, bh, bw});
        conv3x3_forward(in.data(), static_cast<int>(bsz), ca.in_c, static_cast<int>(bh), static_cast<int>(bw),
                        P + ca.w, P + ca.b, ca.out_c, pre1.data());
        if (tp != nullptr) {
            Tensor tb = linear_forward(e, P + tp->w, P + tp->b, tp->in_f, tp->out_f);
            add_channel_bias(pre1, tb);
        }
        Tensor mid = silu(pre1);
        Tensor mask1, mask2;
        if (use_dropout) {
            mask1 = dropout_mask(mid.shape(), topo_.dropout, *dropout_rng);
            mid = mul(mid, mask1);
        }
        Tensor pre2({bsz, cb.out_c, bh, bw});
        conv3x3_forward(mid.data(), static_cast<int>(bsz), cb.in_c, static_cast<int>(bh), static_cast<int>(bw),
                        P + cb.w, P + cb.b, cb.out_c, pre2.data());
        Tensor out = silu(pre2);
        if (use_dropout) {
            mask2 = dropout_mask(out.shape(), topo_.dropout, *dropout_rng);
            out = mul(out, mask2);
        }
        if (sb != nullptr) {
            sb->in = in;
            sb->pre1 = std::move(pre1);
            sb->mid = std::move(mid);
            sb->pre2 = std::move(pre2);
            sb->out = out;
            sb->mask1 = std::move(mask1);
            sb->mask2 = std::move(mask2);
        }
        return out;
    };

    if (stash != nullptr) {
        stash->input = x;
        stash->emb0 = std::move(emb0);
        stash->e1_pre = std::move(e1_pre);
        stash->e1 = std::move(e1);
        stash->e = e;
        stash->down.resize(static_cast<size_t>(topo_.levels));
        stash->up.resize(static_cast<size_t>(topo_.levels - 1));
    }

    std::vector<Tensor> skips(static_cast<size_t>(topo_.levels));
    Tensor cur = x;
    for (int l = 0; l < topo_.levels; ++l) {
        const LinRef* tp = timed ? &ly.down_t[static_cast<size_t>(l)] : nullptr;
        Stash::Block* sb = stash ? &stash->down[static_cast<size_t>(l)] : nullptr;
        Tensor out = block(cur, ly.down_a[static_cast<size_t>(l)], ly.down_b[static_cast<size_t>(l)], tp, sb);
        skips[static_cast<size_t>(l)] = out;
        cur = (l < topo_.levels - 1) ? avgpool2(out) : out;
    }
    for (int i = 0; i < topo_.levels - 1; ++i) {
        const int l = topo_.levels - 2 - i;
        Tensor up_in = upsample2(cur);
        Tensor cat = concat_channels(up_in, skips[static_cast<size_t>(l)]);
        const LinRef* tp = timed ? &ly.up_t[static_cast<size_t>(i)] : nullptr;
        Stash::Block* sb = stash ? &stash->up[static_cast<size_t>(i)] : nullptr;
        cur = block(cat, ly.up_a[static_cast<size_t>(i)], ly.up_b[static_cast<size_t>(i)], tp, sb);
    }

    Tensor y({bsz, topo_.in_channels, h, w});
    conv3x3_forward(cur.data(), static_cast<int>(bsz), ly.out.in_c, static_cast<int>(h), static_cast<int>(w),
                    P + ly.out.w, P + ly.out.b, ly.out.out_c, y.data());
    if (stash != nullptr) stash->out_in = std::move(cur);
    return y;
}

Tensor Unet::forward(const Tensor& x, std::span<const double> t_norm) const {
    return run(x, t_norm, nullptr, nullptr);
}

void Unet::backward(const Stash& stash, const Tensor& dout, std::span<scalar> grad) const {
    Layout ly = make_layout(topo_);
    const scalar* P = params_.data();
    scalar* G = grad.data();
    const bool timed = topo_.kind == NetKind::epsilon;
    const int64_t bsz = stash.input.extent(0);

    Tensor de; // accumulated gradient on the shared time vector
    if (timed) de = Tensor({bsz, topo_.time_dim});

    // final conv
    const Tensor& fin = stash.out_in;
    conv3x3_backward_params(fin.data(), dout.data(), static_cast<int>(bsz), ly.out.in_c, ly.out.out_c,
                            static_cast<int>(fin.extent(2)), static_cast<int>(fin.extent(3)),
                            G + ly.out.w, G + ly.out.b);
    Tensor dcur(fin.shape());
    conv3x3_backward_input(dout.data(), static_cast<int>(bsz), ly.out.out_c,
                           static_cast<int>(fin.extent(2)), static_cast<int>(fin.extent(3)),
                           P + ly.out.w, ly.out.in_c, dcur.data());

    // shared block backward; returns gradient w.r.t. the block input
    auto block_back = [&](const Stash::Block& sb, const ConvRef& ca, const ConvRef& cb, const LinRef* tp,
                          const Tensor& d_out) {
        Tensor d = d_out;
        if (sb.mask2.numel() > 0) d = mul(d, sb.mask2);
        Tensor dpre2 = silu_backward(d, sb.pre2);
        conv3x3_backward_params(sb.mid.data(), dpre2.data(), static_cast<int>(bsz), cb.in_c, cb.out_c,
                                static_cast<int>(sb.mid.extent(2)), static_cast<int>(sb.mid.extent(3)),
                                G + cb.w, G + cb.b);
        Tensor dmid(sb.mid.shape());
        conv3x3_backward_input(dpre2.data(), static_cast<int>(bsz), cb.out_c,
                               static_cast<int>(sb.mid.extent(2)), static_cast<int>(sb.mid.extent(3)),
                               P + cb.w, cb.in_c, dmid.data());
        if (sb.mask1.numel() > 0) dmid = mul(dmid, sb.mask1);
        Tensor dpre1 = silu_backward(dmid, sb.pre1);
        if (tp != nullptr) {
            Tensor dtb = channel_bias_grad(dpre1);
            Tensor de_part = linear_backward(dtb, stash.e, P + tp->w, G + tp->w, G + tp->b, tp->in_f, tp->out_f);
            de = add(de, de_part);
        }
        conv3x3_backward_params(sb.in.data(), dpre1.data(), static_cast<int>(bsz), ca.in_c, ca.out_c,
                                static_cast<int>(sb.in.extent(2)), static_cast<int>(sb.in.extent(3)),
                                G + ca.w, G + ca.b);
        Tensor din(sb.in.shape());
        conv3x3_backward_input(dpre1.data(), static_cast<int>(bsz), ca.out_c,
                               static_cast<int>(sb.in.extent(2)), static_cast<int>(sb.in.extent(3)),
                               P + ca.w, ca.in_c, din.data());
        return din;
    };

    // up blocks, reverse of processing order
    std::vector<Tensor> dskip(static_cast<size_t>(topo_.levels));
    for (int i = topo_.levels - 2; i >= 0; --i) {
        const int l = topo_.levels - 2 - i;
        const LinRef* tp = timed ? &ly.up_t[static_cast<size_t>(i)] : nullptr;
        Tensor dcat = block_back(stash.up[static_cast<size_t>(i)], ly.up_a[static_cast<size_t>(i)],
                                 ly.up_b[static_cast<size_t>(i)], tp, dcur);
        Tensor dup, ds;
        split_channels(dcat, topo_.channels[static_cast<size_t>(l + 1)], dup, ds);
        dskip[static_cast<size_t>(l)] = std::move(ds);
        dcur = upsample2_backward(dup);
    }

    // down blocks, bottom to top
    Tensor dpool_back;
    for (int l = topo_.levels - 1; l >= 0; --l) {
        Tensor d_out;
        if (l == topo_.levels - 1) {
            d_out = std::move(dcur);
        } else {
            d_out = std::move(dpool_back);
            if (dskip[static_cast<size_t>(l)].numel() > 0) d_out = add(d_out, dskip[static_cast<size_t>(l)]);
        }
        const LinRef* tp = timed ? &ly.down_t[static_cast<size_t>(l)] : nullptr;
        Tensor din = block_back(stash.down[static_cast<size_t>(l)], ly.down_a[static_cast<size_t>(l)],
                                ly.down_b[static_cast<size_t>(l)], tp, d_out);
        if (l > 0) {
            const Tensor& above = stash.down[static_cast<size_t>(l - 1)].out;
            dpool_back = avgpool2_backward(din, above.extent(2), above.extent(3));
        }
    }

    if (timed) {
        Tensor de1 = linear_backward(de, stash.e1, P + ly.tm2.w, G + ly.tm2.w, G + ly.tm2.b,
                                     ly.tm2.in_f, ly.tm2.out_f);
        Tensor de1_pre = silu_backward(de1, stash.e1_pre);
        linear_backward(de1_pre, stash.emb0, P + ly.tm1.w, G + ly.tm1.w, G + ly.tm1.b,
                        ly.tm1.in_f, ly.tm1.out_f);
    }
}

GradientBundle Unet::loss_and_grad(const Tensor& x, std::span<const double> t_norm,
                                   const OutputLoss& loss_fn, Rng* dropout_rng) const {
    Stash stash;
    Tensor out = run(x, t_norm, &stash, dropout_rng);
    Tensor dout(out.shape());
    GradientBundle gb;
    gb.loss = loss_fn(out, dout);
    gb.grad.assign(params_.size(), scalar(0));
    backward(stash, dout, gb.grad);
    return gb;
}

uint64_t Unet::param_hash() const {
    uint64_t h = 0xCBF29CE484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
    for (size_t i = 0; i < params_.size() * sizeof(scalar); ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

// ---- checkpoint io ----------------------------------------------------------

uint32_t crc32(const void* data, size_t len, uint32_t seed) {
    static uint32_t table[256];
    static bool ready = false;
    if (!ready) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        ready = true;
    }
    uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[8] = {'D', 'A', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T)); // little-endian host assumed
}

template <typename T>
T take(const std::string& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size())
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

std::string serialize_net(const Unet& net) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put<uint32_t>(buf, kVersion);
    const Topology& t = net.topology();
    put<uint32_t>(buf, static_cast<uint32_t>(t.kind));
    put<uint32_t>(buf, static_cast<uint32_t>(t.levels));
    put<uint32_t>(buf, static_cast<uint32_t>(t.in_channels));
    put<uint32_t>(buf, static_cast<uint32_t>(t.time_dim));
    put<uint32_t>(buf, t.attention ? 1u : 0u);
    put<double>(buf, t.dropout);
    for (int c : t.channels) put<uint32_t>(buf, static_cast<uint32_t>(c));
    put<uint64_t>(buf, static_cast<uint64_t>(net.param_count()));
    for (scalar v : net.params()) put<float>(buf, static_cast<float>(v));
    put<uint32_t>(buf, crc32(buf.data(), buf.size()));
    return buf;
}

Unet deserialize_net(const std::string& buf, size_t& pos) {
    if (buf.size() < pos + sizeof(kMagic))
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated file");
    if (std::memcmp(buf.data() + pos, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(CheckpointError::Code::bad_magic, "checkpoint: bad magic");
    pos += sizeof(kMagic);
    const uint32_t version = take<uint32_t>(buf, pos);
    if (version != kVersion)
        throw CheckpointError(CheckpointError::Code::bad_version, "checkpoint: unsupported version");
    Topology t;
    const uint32_t kind = take<uint32_t>(buf, pos);
    if (kind > 1) throw CheckpointError(CheckpointError::Code::bad_topology, "checkpoint: unknown net kind");
    t.kind = static_cast<NetKind>(kind);
    t.levels = static_cast<int>(take<uint32_t>(buf, pos));
    t.in_channels = static_cast<int>(take<uint32_t>(buf, pos));
    t.time_dim = static_cast<int>(take<uint32_t>(buf, pos));
    const uint32_t attention = take<uint32_t>(buf, pos);
    t.dropout = take<double>(buf, pos);
    if (t.levels < 1 || t.levels > 16 || attention > 1)
        throw CheckpointError(CheckpointError::Code::bad_topology, "checkpoint: invalid topology");
    t.attention = attention != 0;
    t.channels.resize(static_cast<size_t>(t.levels));
    for (int l = 0; l < t.levels; ++l) t.channels[static_cast<size_t>(l)] = static_cast<int>(take<uint32_t>(buf, pos));
    const uint64_t count = take<uint64_t>(buf, pos);
    std::vector<scalar> params(count);
    for (uint64_t i = 0; i < count; ++i) params[i] = static_cast<scalar>(take<float>(buf, pos));
    try {
        return Unet(std::move(t), std::move(params));
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(CheckpointError::Code::bad_topology, std::string("checkpoint: ") + e.what());
    }
}

void save_checkpoint(const Unet& net, const std::filesystem::path& path) {
    const std::string buf = serialize_net(net);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: cannot open " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: write failed " + path.string());
}

std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

Unet load_checkpoint(const std::filesystem::path& path) {
    std::string buf = read_file_bytes(path);
    if (buf.size() < sizeof(kMagic) + 2 * sizeof(uint32_t))
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated file");
    // Header first so a flipped magic/version byte reports as such, then the
    // CRC guards the rest of the payload.
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(CheckpointError::Code::bad_magic, "checkpoint: bad magic");
    uint32_t version;
    std::memcpy(&version, buf.data() + sizeof(kMagic), sizeof(version));
    if (version != kVersion)
        throw CheckpointError(CheckpointError::Code::bad_version, "checkpoint: unsupported version");
    const size_t body = buf.size() - sizeof(uint32_t);
    uint32_t stored;
    std::memcpy(&stored, buf.data() + body, sizeof(stored));
    if (crc32(buf.data(), body) != stored)
        throw CheckpointError(CheckpointError::Code::crc_mismatch, "checkpoint: CRC mismatch");
    size_t pos = 0;
    Unet net = deserialize_net(buf, pos);
    if (pos != body)
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: trailing bytes");
    return net;
}

Unet load_checkpoint(const std::filesystem::path& path, NetKind expected_kind) {
    Unet net = load_checkpoint(path);
    if (net.kind() != expected_kind)
        throw CheckpointError(CheckpointError::Code::wrong_kind, "checkpoint: network kind mismatch");
    return net;
}

} // namespace daed
