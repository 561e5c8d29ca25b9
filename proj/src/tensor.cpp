#include "daed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace daed {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

static void check_shape(const Shape& shape) {
    for (int64_t e : shape) {
        if (e < 1) throw std::invalid_argument("tensor: extents must be >= 1");
    }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<size_t>(shape_numel(shape_)), scalar(0));
}

Tensor::Tensor(Shape shape, std::vector<scalar> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
        throw std::invalid_argument("tensor: data length does not match shape");
}

Tensor Tensor::full(Shape shape, scalar value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::scalar_value(scalar value) {
    Tensor t;
    t.data_.assign(1, value);
    return t;
}

scalar Tensor::item() const {
    if (data_.size() != 1) throw std::invalid_argument("tensor: item() requires a single element");
    return data_[0];
}

bool Tensor::all_finite() const {
    for (scalar v : data_)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

Tensor gaussian(Rng& rng, const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("gaussian: shape must be nonempty");
    check_shape(shape);
    Tensor t(shape);
    for (auto& v : t.values()) v = static_cast<scalar>(rng.normal());
    return t;
}

Tensor axpy_like(double a, const Tensor& x, double b, const Tensor& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("axpy_like: shape mismatch");
    Tensor out(x.shape());
    const scalar* xs = x.data();
    const scalar* ys = y.data();
    scalar* os = out.data();
    const scalar sa = static_cast<scalar>(a);
    const scalar sb = static_cast<scalar>(b);
    for (int64_t i = 0; i < x.numel(); ++i) os[i] = sa * xs[i] + sb * ys[i];
    return out;
}

namespace {

struct Accum {
    double sum = 0.0;
    double mx = -std::numeric_limits<double>::infinity();
    double mn = std::numeric_limits<double>::infinity();

    void feed(ReduceOp op, double v) {
        switch (op) {
            case ReduceOp::mean:
            case ReduceOp::sum: sum += v; break;
            case ReduceOp::mean_abs: sum += std::abs(v); break;
            case ReduceOp::mean_sq: sum += v * v; break;
            case ReduceOp::max: mx = std::max(mx, v); break;
            case ReduceOp::min: mn = std::min(mn, v); break;
        }
    }

    double finish(ReduceOp op, int64_t count) const {
        switch (op) {
            case ReduceOp::sum: return sum;
            case ReduceOp::mean:
            case ReduceOp::mean_abs:
            case ReduceOp::mean_sq: return sum / static_cast<double>(count);
            case ReduceOp::max: return mx;
            case ReduceOp::min: return mn;
        }
        return 0.0;
    }
};

} // namespace

Tensor reduce(const Tensor& t, ReduceOp op) {
    Accum acc;
    for (scalar v : t.values()) acc.feed(op, static_cast<double>(v));
    return Tensor::scalar_value(static_cast<scalar>(acc.finish(op, t.numel())));
}

double reduce_scalar(const Tensor& t, ReduceOp op) {
    return static_cast<double>(reduce(t, op).item());
}

Tensor reduce(const Tensor& t, ReduceOp op, std::span<const int> axes) {
    const int64_t rank = t.rank();
    std::vector<bool> reduced(static_cast<size_t>(rank), false);
    for (int a : axes) {
        if (a < 0 || a >= rank) throw std::invalid_argument("reduce: axis out of range");
        if (reduced[static_cast<size_t>(a)]) throw std::invalid_argument("reduce: duplicate axis");
        reduced[static_cast<size_t>(a)] = true;
    }

    Shape out_shape;
    int64_t reduced_count = 1;
    for (int64_t a = 0; a < rank; ++a) {
        if (reduced[static_cast<size_t>(a)]) reduced_count *= t.extent(a);
        else out_shape.push_back(t.extent(a));
    }
    if (out_shape.empty()) return reduce(t, op);

    std::vector<Accum> cells(static_cast<size_t>(shape_numel(out_shape)));

    std::vector<int64_t> coord(static_cast<size_t>(rank), 0);
    for (int64_t i = 0; i < t.numel(); ++i) {
        int64_t out_idx = 0;
        for (int64_t a = 0; a < rank; ++a) {
            if (!reduced[static_cast<size_t>(a)]) out_idx = out_idx * t.extent(a) + coord[static_cast<size_t>(a)];
        }
        // out_idx above multiplies by the input extent of kept axes, which
        // equals the output extent for those axes.
        cells[static_cast<size_t>(out_idx)].feed(op, static_cast<double>(t[i]));
        for (int64_t a = rank - 1; a >= 0; --a) {
            if (++coord[static_cast<size_t>(a)] < t.extent(a)) break;
            coord[static_cast<size_t>(a)] = 0;
        }
    }

    Tensor out(out_shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<scalar>(cells[static_cast<size_t>(i)].finish(op, reduced_count));
    return out;
}

Tensor add(const Tensor& x, const Tensor& y) { return axpy_like(1.0, x, 1.0, y); }
Tensor sub(const Tensor& x, const Tensor& y) { return axpy_like(1.0, x, -1.0, y); }

Tensor mul(const Tensor& x, const Tensor& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
    return out;
}

Tensor scale(const Tensor& x, double a) {
    Tensor out(x.shape());
    const scalar sa = static_cast<scalar>(a);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = sa * x[i];
    return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    Tensor out(x.shape());
    const scalar slo = static_cast<scalar>(lo);
    const scalar shi = static_cast<scalar>(hi);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::min(shi, std::max(slo, x[i]));
    return out;
}

} // namespace daed
