#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "daed/rng.hpp"
#include "daed/tensor.hpp"

namespace daed {

enum class NetKind : uint32_t { epsilon = 0, dae = 1 };

// Shape of the mini U-Net: per-level [conv3x3 -> SiLU -> conv3x3] blocks,
// stride-2 average pooling down, nearest-neighbor upsampling with skip
// concatenation up, and (for epsilon nets) a sinusoidal time embedding
// projected to a per-channel bias in every block.
struct Topology {
    NetKind kind = NetKind::epsilon;
    int levels = 2;
    std::vector<int> channels = {16, 32};
    int time_dim = 32; // ignored for dae nets
    int in_channels = 1;
    double dropout = 0.0; // train-mode probability; 0 disables
    bool attention = false; // reserved; must be false

    void validate() const;
    bool operator==(const Topology&) const = default;
};

struct ParamSegment {
    std::string name;
    int64_t offset = 0;
    int64_t size = 0;
};

struct GradientBundle {
    double loss = 0.0;
    std::vector<scalar> grad; // aligned 1:1 with the parameter store
};

// Maps the net output to (loss, d loss / d output). dout arrives zeroed
// with the output's shape.
using OutputLoss = std::function<double(const Tensor& out, Tensor& dout)>;

class Unet {
public:
    Unet(Topology topo, Rng& rng);
    // Adopt an existing parameter vector (checkpoint loads, tests).
    Unet(Topology topo, std::vector<scalar> params);

    const Topology& topology() const { return topo_; }
    NetKind kind() const { return topo_.kind; }
    int64_t param_count() const { return static_cast<int64_t>(params_.size()); }
    std::span<scalar> params() { return params_; }
    std::span<const scalar> params() const { return params_; }
    const std::vector<ParamSegment>& segments() const { return segments_; }

    // Inference pass. t_norm carries one normalized time per sample for
    // epsilon nets and must be empty for dae nets. Output shape == input
    // shape.
    Tensor forward(const Tensor& x, std::span<const double> t_norm = {}) const;

    // Training pass: forward with stashed activations, then reverse-mode
    // backprop of the scalar loss produced by loss_fn. dropout_rng enables
    // train-mode dropout when the topology asks for it.
    GradientBundle loss_and_grad(const Tensor& x, std::span<const double> t_norm,
                                 const OutputLoss& loss_fn, Rng* dropout_rng = nullptr) const;

    uint64_t param_hash() const;

private:
    struct Stash;
    Tensor run(const Tensor& x, std::span<const double> t_norm, Stash* stash, Rng* dropout_rng) const;
    void backward(const Stash& stash, const Tensor& dout, std::span<scalar> grad) const;

    Topology topo_;
    std::vector<scalar> params_;
    std::vector<ParamSegment> segments_;
};

// Checkpoint file: magic "DAEDCKPT", u32 version, topology descriptor,
// u64 parameter count, raw little-endian f32 parameters, trailing CRC32.
void save_checkpoint(const Unet& net, const std::filesystem::path& path);
Unet load_checkpoint(const std::filesystem::path& path);
Unet load_checkpoint(const std::filesystem::path& path, NetKind expected_kind);

// Raw (de)serialization, shared with the DAED container format.
std::string serialize_net(const Unet& net);
Unet deserialize_net(const std::string& buf, size_t& pos);
std::string read_file_bytes(const std::filesystem::path& path);

uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

} // namespace daed
