#include "daed/image.hpp"

#include <stdexcept>

namespace daed {

ImageBatch::ImageBatch(Tensor t, std::string prov)
    : tensor(std::move(t)), provenance(std::move(prov)) {
    if (tensor.rank() != 4)
        throw std::invalid_argument("image batch: tensor must have shape (B, C, H, W)");
}

double ImageBatch::mean_square() const {
    return reduce_scalar(tensor, ReduceOp::mean_sq);
}

std::vector<double> ImageBatch::mean_square_per_image() const {
    const int64_t bsz = batch();
    const int64_t per = pixels_per_image();
    std::vector<double> out(static_cast<size_t>(bsz), 0.0);
    const scalar* p = tensor.data();
    for (int64_t b = 0; b < bsz; ++b) {
        double acc = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            double v = static_cast<double>(p[b * per + i]);
            acc += v * v;
        }
        out[static_cast<size_t>(b)] = acc / static_cast<double>(per);
    }
    return out;
}

} // namespace daed
