#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "daed/rng.hpp"

namespace daed {

// Element type of all arrays. The 64-bit build (DAED_REAL64) exists for
// finite-difference gradient checks; everything else runs in single
// precision.
#if defined(DAED_REAL64)
using scalar = double;
#else
using scalar = float;
#endif

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);

// Dense row-major value array. Treated as immutable once returned from an
// operation; mutation is reserved for owners (parameter stores, builders).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<scalar> data);

    static Tensor full(Shape shape, scalar value);
    static Tensor scalar_value(scalar value); // rank-0

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t extent(int64_t axis) const { return shape_.at(static_cast<size_t>(axis)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    scalar* data() { return data_.data(); }
    const scalar* data() const { return data_.data(); }
    std::span<scalar> values() { return data_; }
    std::span<const scalar> values() const { return data_; }

    scalar& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    scalar operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Value of a single-element tensor.
    scalar item() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

private:
    Shape shape_;
    std::vector<scalar> data_;
};

// i.i.d. standard normal samples, deterministic given the rng state.
Tensor gaussian(Rng& rng, const Shape& shape);

// Elementwise a*x + b*y.
Tensor axpy_like(double a, const Tensor& x, double b, const Tensor& y);

enum class ReduceOp { mean, sum, max, min, mean_abs, mean_sq };

// Full reduction to a rank-0 tensor.
Tensor reduce(const Tensor& t, ReduceOp op);
// Reduction over the given axes; reduced axes are dropped from the shape.
Tensor reduce(const Tensor& t, ReduceOp op, std::span<const int> axes);

double reduce_scalar(const Tensor& t, ReduceOp op);

Tensor add(const Tensor& x, const Tensor& y);
Tensor sub(const Tensor& x, const Tensor& y);
Tensor mul(const Tensor& x, const Tensor& y);
Tensor scale(const Tensor& x, double a);
Tensor clamp(const Tensor& x, double lo, double hi);

} // namespace daed
