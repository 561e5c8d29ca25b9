#include "daed/daed.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "daed/error.hpp"

namespace daed {

SplitSchedule split_schedule(const NoiseSchedule& s, int k) {
    if (k < 1 || k >= s.steps())
        throw std::invalid_argument("split_schedule: k must lie in [1, T-1]");
    SplitSchedule out;
    out.beta1 = s.one_minus_alpha_bar(k);
    out.switch_step = k;
    // The tail keeps the source betas; renormalizing alpha_bar by
    // alpha_bar_k is the same as restarting the product at step k+1.
    std::vector<double> betas;
    betas.reserve(static_cast<size_t>(s.steps() - k));
    for (int t = k + 1; t <= s.steps(); ++t) betas.push_back(s.beta(t));
    out.tail = NoiseSchedule::custom(std::move(betas));
    out.gen_map = StepMap{k, s.steps()};
    return out;
}

DaedModel split_from_ddgm(const NoiseSchedule& s, const Unet& net, int k, Rng& dae_init_rng) {
    if (net.kind() != NetKind::epsilon)
        throw std::invalid_argument("split_from_ddgm: source net must be an epsilon net");
    SplitSchedule sp = split_schedule(s, k);
    Topology dae_topo = net.topology();
    dae_topo.kind = NetKind::dae;
    return DaedModel{sp.beta1, std::move(sp.tail), Unet(dae_topo, dae_init_rng), net,
                     sp.switch_step, sp.gen_map, {}};
}

DaedModel make_daed(double beta1, NoiseSchedule tail, Unet dae, Unet generator) {
    if (!(beta1 > 0.0) || !(beta1 < 1.0))
        throw std::invalid_argument("make_daed: beta1 must lie in (0, 1)");
    if (dae.kind() != NetKind::dae || generator.kind() != NetKind::epsilon)
        throw std::invalid_argument("make_daed: wrong network kinds");
    StepMap map{0, tail.steps()};
    return DaedModel{beta1, std::move(tail), std::move(dae), std::move(generator), 0, map, {}};
}

int step_for_noise_level(const NoiseSchedule& s, double beta) {
    if (!(beta > 0.0) || !(beta < 1.0))
        throw std::invalid_argument("step_for_noise_level: beta must lie in (0, 1)");
    for (int k = 1; k <= s.steps(); ++k)
        if (s.one_minus_alpha_bar(k) >= beta) return k;
    throw DataError("schedule too short for noise level");
}

std::span<const DaedPreset> daed_presets() {
    // (base T, beta1, tail length) pairings used in the reference
    // experiments for T = 500 and T = 1000 chains.
    static const DaedPreset presets[] = {
        {500, 0.3, 426},  {500, 0.2, 445},  {500, 0.1, 468},   {500, 0.025, 489}, {500, 0.001, 499},
        {1000, 0.2, 891}, {1000, 0.1, 900}, {1000, 0.025, 979}, {1000, 0.001, 999},
    };
    return presets;
}

ImageBatch daed_sample(const DaedModel& m, const Shape& shape, Rng& rng) {
    ImageBatch x1 = ancestral_sample(m.tail, m.kernel, m.generator, shape, rng, m.gen_map,
                                     /*clamp_final=*/false);
    Tensor recon = m.dae.forward(x1.tensor);
    return {clamp(recon, -1.0, 1.0), "sampled"};
}

DaedObjective daed_objective(const DaedModel& m, const ImageBatch& x0, Rng& rng,
                             TrainConfig::Objective objective) {
    const int64_t bsz = x0.batch();
    const int64_t per = x0.pixels_per_image();
    Tensor x1 = axpy_like(std::sqrt(1.0 - m.beta1), x0.tensor, std::sqrt(m.beta1),
                          gaussian(rng, x0.tensor.shape()));

    DaedObjective out;
    {
        Tensor recon = m.dae.forward(x1);
        Tensor diff = sub(x0.tensor, recon);
        out.loss_dae = reduce_scalar(diff, ReduceOp::mean_sq);
    }

    const int tail_T = m.tail.steps();
    std::vector<int> ts(static_cast<size_t>(bsz));
    std::vector<double> t_norm(static_cast<size_t>(bsz));
    for (int64_t b = 0; b < bsz; ++b) {
        ts[static_cast<size_t>(b)] = 1 + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(tail_T));
        t_norm[static_cast<size_t>(b)] = m.gen_map.norm(ts[static_cast<size_t>(b)]);
    }
    Tensor eps = gaussian(rng, x1.shape());
    Tensor xt(x1.shape());
    for (int64_t b = 0; b < bsz; ++b) {
        const int t = ts[static_cast<size_t>(b)];
        const scalar sa = static_cast<scalar>(std::sqrt(m.tail.alpha_bar(t)));
        const scalar sn = static_cast<scalar>(std::sqrt(m.tail.one_minus_alpha_bar(t)));
        for (int64_t i = 0; i < per; ++i) {
            const int64_t j = b * per + i;
            xt[j] = sa * x1[j] + sn * eps[j];
        }
    }
    Tensor pred = m.generator.forward(xt, t_norm);
    Tensor dpred(pred.shape());
    ImageBatch x1_view{x1, x0.provenance};
    if (objective == TrainConfig::Objective::simple)
        out.loss_diff = simple_objective(pred, eps, dpred, {});
    else
        out.loss_diff = vlb_objective_tail(m.tail, m.kernel, pred, x1_view, xt, ts, dpred, {});
    out.total = out.loss_dae + out.loss_diff;
    return out;
}

SwitchPoint choose_switch_point(const NoiseSchedule& s, double dataset_ms, double target_log_snr) {
    return step_at_log_snr(s, dataset_ms, target_log_snr);
}

// ---- container checkpoint ----------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'A', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kDaedKind = 2;

template <typename T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size())
        throw CheckpointError(CheckpointError::Code::truncated, "daed checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

void save_daed_checkpoint(const DaedModel& m, const std::filesystem::path& path) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put<uint32_t>(buf, kVersion);
    put<uint32_t>(buf, kDaedKind);
    put<double>(buf, m.beta1);
    put<uint32_t>(buf, static_cast<uint32_t>(m.switch_step));
    put<uint32_t>(buf, static_cast<uint32_t>(m.gen_map.offset));
    put<uint32_t>(buf, static_cast<uint32_t>(m.gen_map.denom));
    put<uint32_t>(buf, static_cast<uint32_t>(m.kernel.variance_mode));
    put<uint32_t>(buf, static_cast<uint32_t>(m.tail.steps()));
    for (int t = 1; t <= m.tail.steps(); ++t) put<double>(buf, m.tail.beta(t));
    const std::string dae_blob = serialize_net(m.dae);
    const std::string gen_blob = serialize_net(m.generator);
    put<uint64_t>(buf, dae_blob.size());
    buf += dae_blob;
    put<uint64_t>(buf, gen_blob.size());
    buf += gen_blob;
    put<uint32_t>(buf, crc32(buf.data(), buf.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Code::io, "daed checkpoint: cannot open " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError(CheckpointError::Code::io, "daed checkpoint: write failed " + path.string());
}

DaedModel load_daed_checkpoint(const std::filesystem::path& path) {
    const std::string buf = read_file_bytes(path);
    if (buf.size() < sizeof(kMagic) + 3 * sizeof(uint32_t))
        throw CheckpointError(CheckpointError::Code::truncated, "daed checkpoint: truncated file");
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(CheckpointError::Code::bad_magic, "daed checkpoint: bad magic");
    size_t pos = sizeof(kMagic);
    if (take<uint32_t>(buf, pos) != kVersion)
        throw CheckpointError(CheckpointError::Code::bad_version, "daed checkpoint: unsupported version");
    if (take<uint32_t>(buf, pos) != kDaedKind)
        throw CheckpointError(CheckpointError::Code::wrong_kind, "daed checkpoint: not a DAED container");
    const size_t body = buf.size() - sizeof(uint32_t);
    uint32_t stored;
    std::memcpy(&stored, buf.data() + body, sizeof(stored));
    if (crc32(buf.data(), body) != stored)
        throw CheckpointError(CheckpointError::Code::crc_mismatch, "daed checkpoint: CRC mismatch");

    const double beta1 = take<double>(buf, pos);
    const int switch_step = static_cast<int>(take<uint32_t>(buf, pos));
    StepMap map;
    map.offset = static_cast<int>(take<uint32_t>(buf, pos));
    map.denom = static_cast<int>(take<uint32_t>(buf, pos));
    ReverseKernelConfig kernel;
    kernel.variance_mode = static_cast<ReverseKernelConfig::VarianceMode>(take<uint32_t>(buf, pos));
    const uint32_t tail_T = take<uint32_t>(buf, pos);
    if (tail_T < 1 || tail_T > (1u << 24))
        throw CheckpointError(CheckpointError::Code::bad_topology, "daed checkpoint: invalid tail length");
    std::vector<double> betas(tail_T);
    for (auto& b : betas) b = take<double>(buf, pos);

    const uint64_t dae_len = take<uint64_t>(buf, pos);
    if (pos + dae_len > body)
        throw CheckpointError(CheckpointError::Code::truncated, "daed checkpoint: truncated dae blob");
    size_t sub = pos;
    Unet dae = deserialize_net(buf, sub);
    pos += dae_len;
    const uint64_t gen_len = take<uint64_t>(buf, pos);
    if (pos + gen_len > body)
        throw CheckpointError(CheckpointError::Code::truncated, "daed checkpoint: truncated generator blob");
    sub = pos;
    Unet gen = deserialize_net(buf, sub);
    pos += gen_len;
    if (pos != body)
        throw CheckpointError(CheckpointError::Code::truncated, "daed checkpoint: trailing bytes");
    if (dae.kind() != NetKind::dae || gen.kind() != NetKind::epsilon)
        throw CheckpointError(CheckpointError::Code::wrong_kind, "daed checkpoint: component kind mismatch");

    NoiseSchedule tail = NoiseSchedule::custom(std::move(betas));
    return DaedModel{beta1, std::move(tail), std::move(dae), std::move(gen), switch_step, map, kernel};
}

bool is_daed_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return false;
    char head[sizeof(kMagic) + 2 * sizeof(uint32_t)];
    if (!f.read(head, sizeof(head))) return false;
    if (std::memcmp(head, kMagic, sizeof(kMagic)) != 0) return false;
    uint32_t kind;
    std::memcpy(&kind, head + sizeof(kMagic) + sizeof(uint32_t), sizeof(kind));
    return kind == kDaedKind;
}

} // namespace daed
