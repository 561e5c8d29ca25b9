#pragma once

#include <string>
#include <utility>

#include "daed/tensor.hpp"

namespace daed {

// A batch of images in [-1, 1], shape (B, C, H, W). Provenance is either a
// dataset id or "sampled".
struct ImageBatch {
    Tensor tensor;
    std::string provenance = "sampled";

    ImageBatch() = default;
    ImageBatch(Tensor t, std::string prov);

    int64_t batch() const { return tensor.extent(0); }
    int64_t channels() const { return tensor.extent(1); }
    int64_t height() const { return tensor.extent(2); }
    int64_t width() const { return tensor.extent(3); }
    int64_t pixels_per_image() const { return channels() * height() * width(); }

    // Mean of x^2 over all pixels and images.
    double mean_square() const;
    // Per-image mean of x^2.
    std::vector<double> mean_square_per_image() const;
};

} // namespace daed
