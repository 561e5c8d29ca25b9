#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "daed/image.hpp"
#include "daed/rng.hpp"

namespace daed {

struct DatasetSpec {
    enum class Source { blobs, stripes, idx };
    enum class Split { train, eval };

    Source source = Source::blobs;
    int size = 16;
    int channels = 1;
    int count = 256;
    uint64_t seed = 0;
    Split split = Split::train;
    std::filesystem::path images_path; // idx only
    std::filesystem::path labels_path; // idx only, optional

    // "blobs" | "stripes" | "idx:<images>[,<labels>]"
    static DatasetSpec parse_source(const std::string& text);
};

// Synthetic families: Gaussian bumps ("blobs") and diagonal bars
// ("stripes"). Values are quantized to the 256-level pixel grid in [-1, 1]
// and deterministic per (seed, split, index).
ImageBatch gen_synthetic(const DatasetSpec& spec);

// Loads either kind of DatasetSpec.
ImageBatch load_dataset(const DatasetSpec& spec);

struct IdxData {
    ImageBatch images;
    std::vector<uint8_t> labels; // empty when no label file was given
};

// IDX (big-endian, magic-tagged) reader; u8 pixels map linearly onto
// [-1, 1].
IdxData load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path = {});

// Writer used for fixtures and dataset export.
void write_idx(const ImageBatch& batch, const std::filesystem::path& path);

enum class ImageFormat { pgm, ppm };

// One binary PGM/PPM file per image; [-1, 1] maps onto 0..255 with
// round-half-away-from-zero. Returns the written paths.
std::vector<std::filesystem::path> export_images(const ImageBatch& batch,
                                                 const std::filesystem::path& dir, ImageFormat format);

// All images tiled into one sheet.
std::filesystem::path export_sheet(const ImageBatch& batch, const std::filesystem::path& path,
                                   ImageFormat format);

// Round-trip helper for tests: read one PGM/PPM back into [-1, 1].
ImageBatch read_image(const std::filesystem::path& path);

// Snap values in [-1, 1] onto the 256-level grid.
scalar quantize_to_grid(double v);

} // namespace daed
