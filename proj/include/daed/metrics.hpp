#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "daed/image.hpp"

namespace daed {

struct MetricReport {
    std::string name;
    double value = 0.0;
    std::vector<double> per_image;
    std::string config_hash;
};

// Mean absolute error over all pixels and images.
double mae(const ImageBatch& a, const ImageBatch& b);
MetricReport mae_report(const ImageBatch& a, const ImageBatch& b);

struct MsSsimOptions {
    int scales = 5;
    std::vector<double> weights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double k1 = 0.01;
    double k2 = 0.03;
    double luminance_range = 1.0;
    int window = 11;
    double window_sigma = 1.5;
};

// Multi-scale SSIM on (x+1)/2 channel-mean luminance. Scales that do not
// fit the image are dropped with renormalized weights; the configuration
// actually used lands in config_hash.
MetricReport ms_ssim(const ImageBatch& a, const ImageBatch& b, MsSsimOptions opts = {});

// Frechet distance between Gaussians fitted to seeded random orthonormal
// projections of the two sets. Desk-scale stand-in for feature-space FID.
double gaussian_frechet(const ImageBatch& a_set, const ImageBatch& b_set, int proj_dim, uint64_t seed);

} // namespace daed
