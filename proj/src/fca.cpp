/*=========================================================================
 *
 *  Copyright FractField Contributors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/
#include "fractfield/fca.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "fractfield/parallel.hpp"

namespace fractfield {

namespace {

constexpr double kLayerNormEps = 1e-5;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Cplx = std::complex<double>;

void check_finite(const std::vector<double>& data, const char* what) {
    for (double v : data)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " is not finite");
}

}  // namespace

TokenGrid::TokenGrid(int level, Dims3 dims, std::int64_t channels)
    : level(level), dims(dims), channels(channels),
      data(dims.voxels() * static_cast<std::size_t>(channels), 0.0) {
    if (channels < 1) throw std::invalid_argument("token grid needs >= 1 channel");
}

TokenGrid::TokenGrid(int level, Dims3 dims, std::int64_t channels, std::vector<double> d)
    : level(level), dims(dims), channels(channels), data(std::move(d)) {
    if (channels < 1) throw std::invalid_argument("token grid needs >= 1 channel");
    if (data.size() != dims.voxels() * static_cast<std::size_t>(channels))
        throw std::invalid_argument("token grid data length mismatch");
    check_finite(data, "token grid");
}

std::size_t Tensor::count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

Tensor& WeightSet::add(const std::string& name, std::vector<std::int64_t> shape) {
    if (tensors_.count(name)) throw std::invalid_argument("duplicate tensor: " + name);
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(t.count(), 0.0);
    return tensors_.emplace(name, std::move(t)).first->second;
}

const Tensor& WeightSet::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("missing tensor: " + name);
    return it->second;
}

Tensor& WeightSet::get_mutable(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("missing tensor: " + name);
    return it->second;
}

bool WeightSet::has(const std::string& name) const { return tensors_.count(name) > 0; }

void WeightSet::fill_seeded_uniform(std::uint64_t seed, double lo, double hi) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& [name, t] : tensors_)
        for (double& v : t.data) v = dist(rng);
}

void WeightSet::merge(const WeightSet& other) {
    for (const auto& [name, t] : other.tensors()) {
        if (tensors_.count(name)) throw std::invalid_argument("merge collision: " + name);
        tensors_.emplace(name, t);
    }
}

std::int64_t branch_channels(std::int64_t channels, double alpha) {
    if (!(alpha > 0.0) || alpha > 1.0) throw std::invalid_argument("alpha must be in (0, 1]");
    const double raw = alpha * static_cast<double>(channels);
    const auto rounded = static_cast<std::int64_t>(std::llround(raw));
    if (rounded < 1 || std::abs(raw - static_cast<double>(rounded)) > 1e-9)
        throw std::invalid_argument("alpha*C must be a positive integer");
    return rounded;
}

// --- weight construction ---------------------------------------------------

namespace {

void add_norm(WeightSet& ws, const std::string& name, std::int64_t c) {
    auto& scale = ws.add(name + ".scale", {c});
    std::fill(scale.data.begin(), scale.data.end(), 1.0);
    ws.add(name + ".offset", {c});
}

}  // namespace

WeightSet make_patch_embed_weights(const PatchEmbedConfig& cfg, std::uint64_t seed) {
    WeightSet ws;
    ws.add("embed.proj", {cfg.patch_z * cfg.patch_y * cfg.patch_x, cfg.embed_dim});
    ws.fill_seeded_uniform(seed);
    return ws;
}

WeightSet make_extractor_weights(std::int64_t channels, double alpha, std::uint64_t seed,
                                 const std::string& prefix) {
    const std::int64_t ac = branch_channels(channels, alpha);
    WeightSet ws;
    ws.add(prefix + "branch0.kernel", {ac, ac, 3, 3, 3});
    ws.add(prefix + "branch0.bias", {ac});
    ws.add(prefix + "branch45.kernel", {2 * ac, 2 * ac});
    ws.add(prefix + "branch45.bias", {2 * ac});
    ws.add(prefix + "branch90.kernel", {2 * ac, 2 * ac});
    ws.add(prefix + "branch90.bias", {2 * ac});
    ws.add(prefix + "branchlog.kernel", {ac, ac});
    ws.add(prefix + "branchlog.bias", {ac});
    ws.add(prefix + "fusion.kernel", {channels, 4 * ac + channels});
    ws.add(prefix + "fusion.bias", {channels});
    ws.fill_seeded_uniform(seed);
    add_norm(ws, prefix + "norm", channels);
    add_norm(ws, prefix + "seg0", ac);
    add_norm(ws, prefix + "seg45", ac);
    add_norm(ws, prefix + "seg90", ac);
    add_norm(ws, prefix + "seglog", ac);
    add_norm(ws, prefix + "segskip", channels);
    return ws;
}

WeightSet make_attention_weights(std::int64_t channels, std::uint64_t seed,
                                 const std::string& prefix) {
    WeightSet ws;
    for (const char* n : {"wq", "wk", "wv", "wo"}) ws.add(prefix + n, {channels, channels});
    for (const char* n : {"bq", "bk", "bv", "bo"}) ws.add(prefix + n, {channels});
    ws.fill_seeded_uniform(seed);
    return ws;
}

namespace {

WeightSet make_post_weights(std::int64_t c, std::uint64_t seed, const std::string& prefix) {
    WeightSet ws;
    ws.add(prefix + "mlp.w1", {c, 4 * c});
    ws.add(prefix + "mlp.b1", {4 * c});
    ws.add(prefix + "mlp.w2", {4 * c, c});
    ws.add(prefix + "mlp.b2", {c});
    ws.fill_seeded_uniform(seed);
    add_norm(ws, prefix + "ln", c);
    return ws;
}

WeightSet rename_prefix(const WeightSet& ws, const std::string& from, const std::string& to) {
    WeightSet out;
    for (const auto& [name, t] : ws.tensors()) {
        std::string n = name;
        if (n.compare(0, from.size(), from) == 0) n = to + n.substr(from.size());
        Tensor& nt = out.add(n, t.shape);
        nt.data = t.data;
    }
    return out;
}

}  // namespace

WeightSet make_fca_block_weights(std::int64_t channels, double alpha, int heads,
                                 std::uint64_t seed, bool symmetric_streams) {
    if (heads < 1 || channels % heads != 0)
        throw std::invalid_argument("channels must be divisible by heads");
    WeightSet ws;
    const WeightSet ex_m = make_extractor_weights(channels, alpha, seed + 1, "m.ex.");
    const WeightSet attn_mf = make_attention_weights(channels, seed + 3, "mf.attn.");
    const WeightSet post_m = make_post_weights(channels, seed + 5, "m.post.");
    ws.merge(ex_m);
    ws.merge(attn_mf);
    ws.merge(post_m);
    if (symmetric_streams) {
        ws.merge(rename_prefix(ex_m, "m.ex.", "f.ex."));
        ws.merge(rename_prefix(attn_mf, "mf.attn.", "fm.attn."));
        ws.merge(rename_prefix(post_m, "m.post.", "f.post."));
    } else {
        ws.merge(make_extractor_weights(channels, alpha, seed + 2, "f.ex."));
        ws.merge(make_attention_weights(channels, seed + 4, "fm.attn."));
        ws.merge(make_post_weights(channels, seed + 6, "f.post."));
    }
    return ws;
}

WeightSet make_level_down_weights(std::int64_t channels, std::uint64_t seed) {
    WeightSet ws;
    ws.add("down.kernel", {8 * channels, 2 * channels});
    ws.add("down.bias", {2 * channels});
    ws.fill_seeded_uniform(seed);
    return ws;
}

WeightSet make_level_up_weights(std::int64_t fine_channels, std::uint64_t seed) {
    WeightSet ws;
    ws.add("up.proj.kernel", {2 * fine_channels, fine_channels});
    ws.add("up.proj.bias", {fine_channels});
    ws.add("up.fuse.kernel", {2 * fine_channels, fine_channels});
    ws.add("up.fuse.bias", {fine_channels});
    ws.fill_seeded_uniform(seed);
    return ws;
}

ShapeList expected_extractor_shapes(std::int64_t channels, double alpha,
                                    const std::string& prefix) {
    const std::int64_t ac = branch_channels(channels, alpha);
    ShapeList s;
    s.emplace_back(prefix + "branch0.bias", std::vector<std::int64_t>{ac});
    s.emplace_back(prefix + "branch0.kernel", std::vector<std::int64_t>{ac, ac, 3, 3, 3});
    s.emplace_back(prefix + "branch45.bias", std::vector<std::int64_t>{2 * ac});
    s.emplace_back(prefix + "branch45.kernel", std::vector<std::int64_t>{2 * ac, 2 * ac});
    s.emplace_back(prefix + "branch90.bias", std::vector<std::int64_t>{2 * ac});
    s.emplace_back(prefix + "branch90.kernel", std::vector<std::int64_t>{2 * ac, 2 * ac});
    s.emplace_back(prefix + "branchlog.bias", std::vector<std::int64_t>{ac});
    s.emplace_back(prefix + "branchlog.kernel", std::vector<std::int64_t>{ac, ac});
    s.emplace_back(prefix + "fusion.bias", std::vector<std::int64_t>{channels});
    s.emplace_back(prefix + "fusion.kernel",
                   std::vector<std::int64_t>{channels, 4 * ac + channels});
    s.emplace_back(prefix + "norm.offset", std::vector<std::int64_t>{channels});
    s.emplace_back(prefix + "norm.scale", std::vector<std::int64_t>{channels});
    for (const char* seg : {"seg0", "seg45", "seg90", "seglog"}) {
        s.emplace_back(prefix + seg + std::string(".offset"), std::vector<std::int64_t>{ac});
        s.emplace_back(prefix + seg + std::string(".scale"), std::vector<std::int64_t>{ac});
    }
    s.emplace_back(prefix + "segskip.offset", std::vector<std::int64_t>{channels});
    s.emplace_back(prefix + "segskip.scale", std::vector<std::int64_t>{channels});
    return s;
}

ShapeList expected_attention_shapes(std::int64_t channels, const std::string& prefix) {
    ShapeList s;
    for (const char* n : {"bk", "bo", "bq", "bv"})
        s.emplace_back(prefix + n, std::vector<std::int64_t>{channels});
    for (const char* n : {"wk", "wo", "wq", "wv"})
        s.emplace_back(prefix + n, std::vector<std::int64_t>{channels, channels});
    return s;
}

namespace {

ShapeList expected_post_shapes(std::int64_t c, const std::string& prefix) {
    ShapeList s;
    s.emplace_back(prefix + "ln.offset", std::vector<std::int64_t>{c});
    s.emplace_back(prefix + "ln.scale", std::vector<std::int64_t>{c});
    s.emplace_back(prefix + "mlp.b1", std::vector<std::int64_t>{4 * c});
    s.emplace_back(prefix + "mlp.b2", std::vector<std::int64_t>{c});
    s.emplace_back(prefix + "mlp.w1", std::vector<std::int64_t>{c, 4 * c});
    s.emplace_back(prefix + "mlp.w2", std::vector<std::int64_t>{4 * c, c});
    return s;
}

}  // namespace

ShapeList expected_fca_block_shapes(std::int64_t channels, double alpha, int heads) {
    if (heads < 1 || channels % heads != 0)
        throw std::invalid_argument("channels must be divisible by heads");
    ShapeList s;
    for (const auto& part : {expected_extractor_shapes(channels, alpha, "m.ex."),
                             expected_extractor_shapes(channels, alpha, "f.ex."),
                             expected_attention_shapes(channels, "mf.attn."),
                             expected_attention_shapes(channels, "fm.attn."),
                             expected_post_shapes(channels, "m.post."),
                             expected_post_shapes(channels, "f.post.")})
        s.insert(s.end(), part.begin(), part.end());
    return s;
}

void audit_shapes(const WeightSet& ws, const ShapeList& expected) {
    for (const auto& [name, shape] : expected) {
        if (!ws.has(name)) throw std::invalid_argument("shape audit: missing tensor " + name);
        if (ws.get(name).shape != shape)
            throw std::invalid_argument("shape audit: wrong shape for " + name);
    }
}

// --- forward operations ----------------------------------------------------

TokenGrid patch_embed(const Volume3D& v, const PatchEmbedConfig& cfg, const WeightSet& w) {
    const Dims3 d = v.dims();
    if (cfg.patch_z < 1 || cfg.patch_y < 1 || cfg.patch_x < 1 || cfg.embed_dim < 1)
        throw std::invalid_argument("invalid patch embedding config");
    if (d.d % cfg.patch_z != 0 || d.h % cfg.patch_y != 0 || d.w % cfg.patch_x != 0)
        throw std::invalid_argument("volume dims must be divisible by patch dims");
    const std::int64_t pvol = cfg.patch_z * cfg.patch_y * cfg.patch_x;
    const Tensor& proj = w.get("embed.proj");
    if (proj.shape != std::vector<std::int64_t>{pvol, cfg.embed_dim})
        throw std::invalid_argument("shape audit: wrong shape for embed.proj");

    const Dims3 od{d.d / cfg.patch_z, d.h / cfg.patch_y, d.w / cfg.patch_x};
    TokenGrid out(0, od, cfg.embed_dim);
    Eigen::Map<const RowMat> e(proj.data.data(), pvol, cfg.embed_dim);

    parallel_for_chunks(0, static_cast<std::size_t>(od.d), 1, [&](std::size_t lo, std::size_t hi) {
        Eigen::VectorXd patch(pvol);
        for (std::size_t pz = lo; pz < hi; ++pz) {
            for (std::int64_t py = 0; py < od.h; ++py) {
                for (std::int64_t px = 0; px < od.w; ++px) {
                    std::int64_t k = 0;
                    for (std::int64_t dz = 0; dz < cfg.patch_z; ++dz)
                        for (std::int64_t dy = 0; dy < cfg.patch_y; ++dy)
                            for (std::int64_t dx = 0; dx < cfg.patch_x; ++dx)
                                patch(k++) = v.at(static_cast<std::int64_t>(pz) * cfg.patch_z + dz,
                                                  py * cfg.patch_y + dy, px * cfg.patch_x + dx);
                    Eigen::Map<Eigen::RowVectorXd>(
                        out.data.data() + out.index(static_cast<std::int64_t>(pz), py, px, 0),
                        cfg.embed_dim) = patch.transpose() * e;
                }
            }
        }
    });
    return out;
}

TokenGrid layer_norm_channels(const TokenGrid& t, const std::vector<double>& scale,
                              const std::vector<double>& offset) {
    const auto c = static_cast<std::size_t>(t.channels);
    if (scale.size() != c || offset.size() != c)
        throw std::invalid_argument("layer norm parameter length mismatch");
    TokenGrid out(t.level, t.dims, t.channels);
    parallel_for_chunks(0, t.tokens(), 256, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t tok = lo; tok < hi; ++tok) {
            const double* x = t.data.data() + tok * c;
            double* y = out.data.data() + tok * c;
            double mean = 0.0;
            for (std::size_t i = 0; i < c; ++i) mean += x[i];
            mean /= static_cast<double>(c);
            double var = 0.0;
            for (std::size_t i = 0; i < c; ++i) var += (x[i] - mean) * (x[i] - mean);
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            for (std::size_t i = 0; i < c; ++i) y[i] = (x[i] - mean) * inv * scale[i] + offset[i];
        }
    });
    return out;
}

namespace {

// Per-token segment layer norm, in place over channels [c0, c0+len).
void segment_norm_inplace(TokenGrid& t, std::int64_t c0, std::int64_t len,
                          const std::vector<double>& scale, const std::vector<double>& offset) {
    const auto c = static_cast<std::size_t>(t.channels);
    parallel_for_chunks(0, t.tokens(), 256, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t tok = lo; tok < hi; ++tok) {
            double* x = t.data.data() + tok * c + static_cast<std::size_t>(c0);
            double mean = 0.0;
            for (std::int64_t i = 0; i < len; ++i) mean += x[i];
            mean /= static_cast<double>(len);
            double var = 0.0;
            for (std::int64_t i = 0; i < len; ++i) var += (x[i] - mean) * (x[i] - mean);
            var /= static_cast<double>(len);
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            for (std::int64_t i = 0; i < len; ++i)
                x[i] = (x[i] - mean) * inv * scale[static_cast<std::size_t>(i)] +
                       offset[static_cast<std::size_t>(i)];
        }
    });
}

// 3x3x3 zero-padded convolution over the token grid spatial dims.
// Kernel layout [out][in][kz][ky][kx].
void conv3_relu(const TokenGrid& in, std::int64_t c0, std::int64_t cn, const Tensor& kernel,
                const Tensor& bias, TokenGrid& out, std::int64_t oc0) {
    const Dims3 d = in.dims;
    parallel_for_chunks(0, static_cast<std::size_t>(d.d), 1, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t zz = lo; zz < hi; ++zz) {
            const auto z = static_cast<std::int64_t>(zz);
            for (std::int64_t y = 0; y < d.h; ++y) {
                for (std::int64_t x = 0; x < d.w; ++x) {
                    for (std::int64_t o = 0; o < cn; ++o) {
                        double acc = bias.data[static_cast<std::size_t>(o)];
                        for (std::int64_t kz = -1; kz <= 1; ++kz) {
                            const std::int64_t sz = z + kz;
                            if (sz < 0 || sz >= d.d) continue;
                            for (std::int64_t ky = -1; ky <= 1; ++ky) {
                                const std::int64_t sy = y + ky;
                                if (sy < 0 || sy >= d.h) continue;
                                for (std::int64_t kx = -1; kx <= 1; ++kx) {
                                    const std::int64_t sx = x + kx;
                                    if (sx < 0 || sx >= d.w) continue;
                                    const double* src = in.data.data() + in.index(sz, sy, sx, c0);
                                    const std::size_t kbase = static_cast<std::size_t>(
                                        ((o * cn + 0) * 3 + (kz + 1)) * 3 + (ky + 1)) * 3 +
                                        static_cast<std::size_t>(kx + 1);
                                    // in-channel stride within the kernel is 27
                                    for (std::int64_t i = 0; i < cn; ++i)
                                        acc += kernel.data[kbase + static_cast<std::size_t>(i) * 27] *
                                               src[i];
                                }
                            }
                        }
                        out.data[out.index(z, y, x, oc0 + o)] = acc > 0.0 ? acc : 0.0;
                    }
                }
            }
        }
    });
}

ComplexVolume3D channel_to_volume(const TokenGrid& t, std::int64_t c) {
    std::vector<Cplx> v(t.tokens());
    const auto cn = static_cast<std::size_t>(t.channels);
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = Cplx(t.data[i * cn + static_cast<std::size_t>(c)], 0.0);
    return ComplexVolume3D(t.dims, std::move(v));
}

}  // namespace

TokenGrid frft_feature_extract(const TokenGrid& t, const FcaConfig& cfg, const WeightSet& w,
                               const AxisPlans& plans, const std::string& prefix) {
    if (cfg.spatial_kernel != 3 || cfg.spectral_kernel != 1)
        throw std::invalid_argument("only spatial kernel 3 and spectral kernel 1 are supported");
    check_finite(t.data, "extractor input");
    const std::int64_t c = t.channels;
    audit_shapes(w, expected_extractor_shapes(c, cfg.channel_coeff, prefix));
    const std::int64_t ac = branch_channels(c, cfg.channel_coeff);
    const bool full = cfg.channel_coeff == 1.0;
    if (!full && 3 * ac > c)
        throw std::invalid_argument("channel split needs 3*alpha*C <= C");

    const TokenGrid xn = layer_norm_channels(t, w.get(prefix + "norm.scale").data,
                                             w.get(prefix + "norm.offset").data);
    // Branch input channel slices: every branch sees [0, C) when alpha = 1,
    // otherwise disjoint consecutive alpha*C slices in branch order. The log
    // branch shares the 90-degree branch's transform.
    const std::int64_t s0 = 0;
    const std::int64_t s45 = full ? 0 : ac;
    const std::int64_t s90 = full ? 0 : 2 * ac;

    const std::size_t ntok = t.tokens();
    TokenGrid concat(t.level, t.dims, 4 * ac + c);

    // 0 deg: spatial conv branch (FrFT order 0 is the identity both ways).
    conv3_relu(xn, s0, ac, w.get(prefix + "branch0.kernel"), w.get(prefix + "branch0.bias"),
               concat, 0);

    auto pointwise_relu = [&](const std::vector<double>& stacked, std::int64_t nc,
                              const Tensor& kernel, const Tensor& bias) {
        // stacked: token-major rows of nc channels; kernel [nc, nc] conv layout [out, in]
        std::vector<double> out(stacked.size());
        Eigen::Map<const RowMat> x(stacked.data(), static_cast<Eigen::Index>(ntok), nc);
        Eigen::Map<const RowMat> k(kernel.data.data(), nc, nc);
        Eigen::Map<RowMat> y(out.data(), static_cast<Eigen::Index>(ntok), nc);
        y = x * k.transpose();
        for (std::size_t tok = 0; tok < ntok; ++tok)
            for (std::int64_t i = 0; i < nc; ++i) {
                double& v = out[tok * static_cast<std::size_t>(nc) + static_cast<std::size_t>(i)];
                v += bias.data[static_cast<std::size_t>(i)];
                if (v < 0.0) v = 0.0;
            }
        return out;
    };

    // Complex branch at a given order: FrFT, stack [Re | Im] as 2*ac real
    // channels, pointwise conv + ReLU, re-pair, inverse FrFT, real part.
    auto complex_branch = [&](std::int64_t sbase, FrftOrder order, const char* name,
                              std::int64_t dest, std::vector<ComplexVolume3D>* keep_transform) {
        std::vector<ComplexVolume3D> xf;
        xf.reserve(static_cast<std::size_t>(ac));
        for (std::int64_t ch = 0; ch < ac; ++ch)
            xf.push_back(frft_3d(channel_to_volume(xn, sbase + ch), order, plans));
        if (keep_transform) *keep_transform = xf;

        std::vector<double> stacked(ntok * static_cast<std::size_t>(2 * ac));
        for (std::size_t tok = 0; tok < ntok; ++tok)
            for (std::int64_t ch = 0; ch < ac; ++ch) {
                const Cplx v = xf[static_cast<std::size_t>(ch)].data()[tok];
                stacked[tok * static_cast<std::size_t>(2 * ac) + static_cast<std::size_t>(ch)] =
                    v.real();
                stacked[tok * static_cast<std::size_t>(2 * ac) +
                        static_cast<std::size_t>(ac + ch)] = v.imag();
            }
        stacked = pointwise_relu(stacked, 2 * ac,
                                 w.get(prefix + std::string(name) + ".kernel"),
                                 w.get(prefix + std::string(name) + ".bias"));
        for (std::int64_t ch = 0; ch < ac; ++ch) {
            std::vector<Cplx> re(ntok);
            for (std::size_t tok = 0; tok < ntok; ++tok)
                re[tok] = Cplx(stacked[tok * static_cast<std::size_t>(2 * ac) +
                                       static_cast<std::size_t>(ch)],
                               stacked[tok * static_cast<std::size_t>(2 * ac) +
                                       static_cast<std::size_t>(ac + ch)]);
            const ComplexVolume3D back =
                ifrft_3d(ComplexVolume3D(t.dims, std::move(re)), order, plans);
            for (std::size_t tok = 0; tok < ntok; ++tok)
                concat.data[tok * concat.channels + static_cast<std::size_t>(dest + ch)] =
                    back.data()[tok].real();
        }
    };

    std::vector<ComplexVolume3D> x90;
    complex_branch(s45, FrftOrder{0.5}, "branch45", ac, nullptr);
    complex_branch(s90, FrftOrder{1.0}, "branch90", 2 * ac, &x90);

    // Log-magnitude branch on the saved 90-degree transform: conv acts on
    // A = log(1+|X|), then exp-inversion, phase recombination, inverse FrFT.
    {
        std::vector<double> amag(ntok * static_cast<std::size_t>(ac));
        std::vector<std::vector<Cplx>> phase(static_cast<std::size_t>(ac));
        for (std::int64_t ch = 0; ch < ac; ++ch) {
            const LogMagnitude lm = log_magnitude(x90[static_cast<std::size_t>(ch)]);
            phase[static_cast<std::size_t>(ch)] = lm.phase.data();
            for (std::size_t tok = 0; tok < ntok; ++tok)
                amag[tok * static_cast<std::size_t>(ac) + static_cast<std::size_t>(ch)] =
                    lm.magnitude.data()[tok];
        }
        amag = pointwise_relu(amag, ac, w.get(prefix + "branchlog.kernel"),
                              w.get(prefix + "branchlog.bias"));
        for (std::int64_t ch = 0; ch < ac; ++ch) {
            std::vector<Cplx> rec(ntok);
            for (std::size_t tok = 0; tok < ntok; ++tok)
                rec[tok] = std::expm1(amag[tok * static_cast<std::size_t>(ac) +
                                           static_cast<std::size_t>(ch)]) *
                           phase[static_cast<std::size_t>(ch)][tok];
            const ComplexVolume3D back =
                ifrft_3d(ComplexVolume3D(t.dims, std::move(rec)), FrftOrder{1.0}, plans);
            for (std::size_t tok = 0; tok < ntok; ++tok)
                concat.data[tok * concat.channels + static_cast<std::size_t>(3 * ac + ch)] =
                    back.data()[tok].real();
        }
    }

    // Skip connection: the raw input rides along and is normalized with the
    // other segments below.
    for (std::size_t tok = 0; tok < ntok; ++tok)
        for (std::int64_t ch = 0; ch < c; ++ch)
            concat.data[tok * concat.channels + static_cast<std::size_t>(4 * ac + ch)] =
                t.data[tok * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];

    segment_norm_inplace(concat, 0, ac, w.get(prefix + "seg0.scale").data,
                         w.get(prefix + "seg0.offset").data);
    segment_norm_inplace(concat, ac, ac, w.get(prefix + "seg45.scale").data,
                         w.get(prefix + "seg45.offset").data);
    segment_norm_inplace(concat, 2 * ac, ac, w.get(prefix + "seg90.scale").data,
                         w.get(prefix + "seg90.offset").data);
    segment_norm_inplace(concat, 3 * ac, ac, w.get(prefix + "seglog.scale").data,
                         w.get(prefix + "seglog.offset").data);
    segment_norm_inplace(concat, 4 * ac, c, w.get(prefix + "segskip.scale").data,
                         w.get(prefix + "segskip.offset").data);

    // Pointwise fusion back to C channels.
    TokenGrid out(t.level, t.dims, c);
    const Tensor& fk = w.get(prefix + "fusion.kernel");
    const Tensor& fb = w.get(prefix + "fusion.bias");
    Eigen::Map<const RowMat> xcat(concat.data.data(), static_cast<Eigen::Index>(ntok),
                                  concat.channels);
    Eigen::Map<const RowMat> k(fk.data.data(), c, concat.channels);
    Eigen::Map<RowMat> y(out.data.data(), static_cast<Eigen::Index>(ntok), c);
    y = xcat * k.transpose();
    for (std::size_t tok = 0; tok < ntok; ++tok)
        for (std::int64_t i = 0; i < c; ++i)
            out.data[tok * static_cast<std::size_t>(c) + static_cast<std::size_t>(i)] +=
                fb.data[static_cast<std::size_t>(i)];
    return out;
}

namespace {

struct AttentionParts {
    RowMat q, k, v;
    std::int64_t dk = 0;
};

AttentionParts attention_projections(const TokenGrid& q_src, const TokenGrid& kv_src,
                                     const WeightSet& w, int heads, const std::string& prefix) {
    if (!(q_src.dims == kv_src.dims) || q_src.channels != kv_src.channels)
        throw std::invalid_argument("cross_attention: grid shape mismatch");
    const std::int64_t c = q_src.channels;
    if (heads < 1 || c % heads != 0)
        throw std::invalid_argument("channels must be divisible by heads");
    audit_shapes(w, expected_attention_shapes(c, prefix));

    const auto n = static_cast<Eigen::Index>(q_src.tokens());
    Eigen::Map<const RowMat> xq(q_src.data.data(), n, c);
    Eigen::Map<const RowMat> xkv(kv_src.data.data(), n, c);
    auto linear = [&](const Eigen::Map<const RowMat>& x, const char* wn, const char* bn) {
        Eigen::Map<const RowMat> wm(w.get(prefix + wn).data.data(), c, c);
        Eigen::Map<const Eigen::VectorXd> b(w.get(prefix + bn).data.data(), c);
        RowMat y = x * wm;
        y.rowwise() += b.transpose();
        return y;
    };
    return AttentionParts{linear(xq, "wq", "bq"), linear(xkv, "wk", "bk"),
                          linear(xkv, "wv", "bv"), c / heads};
}

RowMat softmax_scores(const AttentionParts& p, int head) {
    const auto c0 = static_cast<Eigen::Index>(head * p.dk);
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.dk));
    RowMat scores = p.q.middleCols(c0, p.dk) * p.k.middleCols(c0, p.dk).transpose() * scale;
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double m = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - m).exp();
        scores.row(r) /= scores.row(r).sum();
    }
    return scores;
}

}  // namespace

TokenGrid cross_attention(const TokenGrid& q_src, const TokenGrid& kv_src, const WeightSet& w,
                          int heads, const std::string& prefix) {
    const AttentionParts parts = attention_projections(q_src, kv_src, w, heads, prefix);
    const std::int64_t c = q_src.channels;
    const auto n = static_cast<Eigen::Index>(q_src.tokens());
    TokenGrid out(q_src.level, q_src.dims, c);
    Eigen::Map<RowMat> y(out.data.data(), n, c);
    for (int h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * parts.dk);
        y.middleCols(c0, parts.dk) = softmax_scores(parts, h) * parts.v.middleCols(c0, parts.dk);
    }
    return out;
}

std::vector<double> attention_row_weights(const TokenGrid& q_src, const TokenGrid& kv_src,
                                          const WeightSet& w, int heads,
                                          const std::string& prefix) {
    const AttentionParts parts = attention_projections(q_src, kv_src, w, heads, prefix);
    const std::size_t n = q_src.tokens();
    std::vector<double> out(static_cast<std::size_t>(heads) * n * n);
    for (int h = 0; h < heads; ++h) {
        const RowMat scores = softmax_scores(parts, h);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t col = 0; col < n; ++col)
                out[(static_cast<std::size_t>(h) * n + r) * n + col] =
                    scores(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col));
    }
    return out;
}

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

TokenGrid post_stage(const TokenGrid& attended, const TokenGrid& query_input, const WeightSet& w,
                     const std::string& attn_prefix, const std::string& post_prefix) {
    const std::int64_t c = attended.channels;
    const auto n = static_cast<Eigen::Index>(attended.tokens());

    // output projection + residual of the query input
    TokenGrid y(attended.level, attended.dims, c);
    {
        Eigen::Map<const RowMat> a(attended.data.data(), n, c);
        Eigen::Map<const RowMat> wo(w.get(attn_prefix + "wo").data.data(), c, c);
        Eigen::Map<const Eigen::VectorXd> bo(w.get(attn_prefix + "bo").data.data(), c);
        Eigen::Map<const RowMat> q(query_input.data.data(), n, c);
        Eigen::Map<RowMat> ym(y.data.data(), n, c);
        ym = a * wo;
        ym.rowwise() += bo.transpose();
        ym += q;
    }
    const TokenGrid h = layer_norm_channels(y, w.get(post_prefix + "ln.scale").data,
                                            w.get(post_prefix + "ln.offset").data);
    // MLP with expansion 4 and a smooth GELU activation, second residual
    TokenGrid out(h.level, h.dims, c);
    {
        Eigen::Map<const RowMat> hm(h.data.data(), n, c);
        Eigen::Map<const RowMat> w1(w.get(post_prefix + "mlp.w1").data.data(), c, 4 * c);
        Eigen::Map<const Eigen::VectorXd> b1(w.get(post_prefix + "mlp.b1").data.data(), 4 * c);
        Eigen::Map<const RowMat> w2(w.get(post_prefix + "mlp.w2").data.data(), 4 * c, c);
        Eigen::Map<const Eigen::VectorXd> b2(w.get(post_prefix + "mlp.b2").data.data(), c);
        RowMat hidden = hm * w1;
        hidden.rowwise() += b1.transpose();
        for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = gelu(hidden.data()[i]);
        Eigen::Map<RowMat> om(out.data.data(), n, c);
        om = hidden * w2;
        om.rowwise() += b2.transpose();
        om += hm;
    }
    return out;
}

}  // namespace

std::pair<TokenGrid, TokenGrid> fca_block(const TokenGrid& f_m, const TokenGrid& f_f,
                                          const FcaConfig& cfg, const WeightSet& w,
                                          const AxisPlans& plans) {
    if (!(f_m.dims == f_f.dims) || f_m.channels != f_f.channels)
        throw std::invalid_argument("fca_block: stream shape mismatch");
    audit_shapes(w, expected_fca_block_shapes(f_m.channels, cfg.channel_coeff, cfg.heads));

    const TokenGrid o_m = frft_feature_extract(f_m, cfg, w, plans, "m.ex.");
    const TokenGrid o_f = frft_feature_extract(f_f, cfg, w, plans, "f.ex.");

    const TokenGrid a_mf = cross_attention(o_m, o_f, w, cfg.heads, "mf.attn.");
    const TokenGrid a_fm = cross_attention(o_f, o_m, w, cfg.heads, "fm.attn.");

    TokenGrid out_m = post_stage(a_mf, o_m, w, "mf.attn.", "m.post.");
    TokenGrid out_f = post_stage(a_fm, o_f, w, "fm.attn.", "f.post.");
    return {std::move(out_m), std::move(out_f)};
}

TokenGrid level_down(const TokenGrid& t, const WeightSet& w, const std::string& prefix) {
    const Dims3 d = t.dims;
    if (d.d % 2 != 0 || d.h % 2 != 0 || d.w % 2 != 0)
        throw std::invalid_argument("level_down requires even spatial dims");
    const std::int64_t c = t.channels;
    const Tensor& kernel = w.get(prefix + "kernel");
    const Tensor& bias = w.get(prefix + "bias");
    if (kernel.shape != std::vector<std::int64_t>{8 * c, 2 * c} ||
        bias.shape != std::vector<std::int64_t>{2 * c})
        throw std::invalid_argument("shape audit: level_down weights");

    const Dims3 od{d.d / 2, d.h / 2, d.w / 2};
    TokenGrid out(t.level + 1, od, 2 * c);
    Eigen::Map<const RowMat> k(kernel.data.data(), 8 * c, 2 * c);
    Eigen::Map<const Eigen::VectorXd> b(bias.data.data(), 2 * c);

    parallel_for_chunks(0, static_cast<std::size_t>(od.d), 1, [&](std::size_t lo, std::size_t hi) {
        Eigen::VectorXd gathered(8 * c);
        for (std::size_t z = lo; z < hi; ++z) {
            for (std::int64_t y = 0; y < od.h; ++y) {
                for (std::int64_t x = 0; x < od.w; ++x) {
                    std::int64_t slot = 0;
                    for (std::int64_t dz = 0; dz < 2; ++dz)
                        for (std::int64_t dy = 0; dy < 2; ++dy)
                            for (std::int64_t dx = 0; dx < 2; ++dx) {
                                const double* src = t.data.data() +
                                    t.index(static_cast<std::int64_t>(z) * 2 + dz, y * 2 + dy,
                                            x * 2 + dx, 0);
                                for (std::int64_t ch = 0; ch < c; ++ch)
                                    gathered(slot * c + ch) = src[ch];
                                ++slot;
                            }
                    Eigen::Map<Eigen::RowVectorXd>(
                        out.data.data() + out.index(static_cast<std::int64_t>(z), y, x, 0),
                        2 * c) = gathered.transpose() * k + b.transpose();
                }
            }
        }
    });
    return out;
}

TokenGrid level_up(const TokenGrid& t, const TokenGrid& skip, const WeightSet& w,
                   const std::string& prefix) {
    const Dims3 d = t.dims;
    const Dims3 sd = skip.dims;
    if (sd.d != 2 * d.d || sd.h != 2 * d.h || sd.w != 2 * d.w)
        throw std::invalid_argument("level_up: skip dims must equal the doubled dims");
    if (t.channels != 2 * skip.channels)
        throw std::invalid_argument("level_up: coarse channels must be twice the skip channels");
    const std::int64_t c = skip.channels;
    const Tensor& pk = w.get(prefix + "proj.kernel");
    const Tensor& pb = w.get(prefix + "proj.bias");
    const Tensor& fk = w.get(prefix + "fuse.kernel");
    const Tensor& fb = w.get(prefix + "fuse.bias");
    if (pk.shape != std::vector<std::int64_t>{2 * c, c} ||
        pb.shape != std::vector<std::int64_t>{c} ||
        fk.shape != std::vector<std::int64_t>{2 * c, c} ||
        fb.shape != std::vector<std::int64_t>{c})
        throw std::invalid_argument("shape audit: level_up weights");

    TokenGrid out(t.level - 1, sd, c);
    Eigen::Map<const RowMat> pkm(pk.data.data(), 2 * c, c);
    Eigen::Map<const Eigen::VectorXd> pbm(pb.data.data(), c);
    Eigen::Map<const RowMat> fkm(fk.data.data(), 2 * c, c);
    Eigen::Map<const Eigen::VectorXd> fbm(fb.data.data(), c);

    parallel_for_chunks(0, static_cast<std::size_t>(sd.d), 1, [&](std::size_t lo, std::size_t hi) {
        Eigen::VectorXd cat(2 * c);
        for (std::size_t z = lo; z < hi; ++z) {
            for (std::int64_t y = 0; y < sd.h; ++y) {
                for (std::int64_t x = 0; x < sd.w; ++x) {
                    const double* coarse = t.data.data() +
                        t.index(static_cast<std::int64_t>(z) / 2, y / 2, x / 2, 0);
                    Eigen::Map<const Eigen::RowVectorXd> cv(coarse, 2 * c);
                    cat.head(c) = (cv * pkm).transpose() + pbm;  // nearest upsample + projection
                    const double* s = skip.data.data() +
                        skip.index(static_cast<std::int64_t>(z), y, x, 0);
                    for (std::int64_t ch = 0; ch < c; ++ch) cat(c + ch) = s[ch];
                    Eigen::Map<Eigen::RowVectorXd>(
                        out.data.data() + out.index(static_cast<std::int64_t>(z), y, x, 0), c) =
                        cat.transpose() * fkm + fbm.transpose();
                }
            }
        }
    });
    return out;
}

BranchCosts count_branch_params(std::int64_t channels, double alpha) {
    const auto ac = static_cast<unsigned long long>(branch_channels(channels, alpha));
    BranchCosts b;
    b.frft0 = 27ULL * ac * ac;
    b.frft45 = 4ULL * ac * ac;
    b.frft90 = 4ULL * ac * ac;
    b.logmag = ac * ac;
    b.total = b.frft0 + b.frft45 + b.frft90 + b.logmag;
    return b;
}

BranchCosts count_flops(std::int64_t channels, double alpha, const Dims3& grid) {
    BranchCosts b = count_branch_params(channels, alpha);
    const auto v = static_cast<unsigned long long>(grid.voxels());
    b.frft0 *= v;
    b.frft45 *= v;
    b.frft90 *= v;
    b.logmag *= v;
    b.total *= v;
    return b;
}

}  // namespace fractfield
