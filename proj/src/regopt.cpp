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
#include "fractfield/regopt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace fractfield {

void RegistrationConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("step size must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
        throw std::invalid_argument("adaptive-moment decay rates must lie in (0, 1)");
    if (!(adam_epsilon > 0.0)) throw std::invalid_argument("adam epsilon must be > 0");
    if (pyramid_levels < 1) throw std::invalid_argument("pyramid levels must be >= 1");
    loss.validate();
}

Volume3D downsample_average(const Volume3D& v) {
    const Dims3 d = v.dims();
    const Dims3 od{(d.d + 1) / 2, (d.h + 1) / 2, (d.w + 1) / 2};
    std::vector<double> out(od.voxels());
    for (std::int64_t z = 0; z < od.d; ++z) {
        for (std::int64_t y = 0; y < od.h; ++y) {
            for (std::int64_t x = 0; x < od.w; ++x) {
                double acc = 0.0;
                int cnt = 0;
                for (std::int64_t dz = 0; dz < 2; ++dz) {
                    const std::int64_t sz = 2 * z + dz;
                    if (sz >= d.d) continue;
                    for (std::int64_t dy = 0; dy < 2; ++dy) {
                        const std::int64_t sy = 2 * y + dy;
                        if (sy >= d.h) continue;
                        for (std::int64_t dx = 0; dx < 2; ++dx) {
                            const std::int64_t sx = 2 * x + dx;
                            if (sx >= d.w) continue;
                            acc += v.at(sz, sy, sx);
                            ++cnt;
                        }
                    }
                }
                out[(static_cast<std::size_t>(z) * od.h + y) * od.w + x] = acc / cnt;
            }
        }
    }
    const Spacing3 s = v.spacing();
    return Volume3D(od, Spacing3{s.z * 2, s.y * 2, s.x * 2}, std::move(out));
}

DisplacementField upsample_field(const DisplacementField& coarse, const Dims3& fine_dims,
                                 const Spacing3& fine_spacing) {
    const Dims3 cd = coarse.dims();
    const std::size_t cn = cd.voxels();
    DisplacementField fine(fine_dims, fine_spacing);
    std::vector<double>& out = fine.mutable_components();
    const std::size_t fn = fine_dims.voxels();

    for (int comp = 0; comp < 3; ++comp) {
        std::vector<double> plane(coarse.components().begin() + comp * cn,
                                  coarse.components().begin() + (comp + 1) * cn);
        const Volume3D cvol(cd, Spacing3{}, std::move(plane));
        for (std::int64_t z = 0; z < fine_dims.d; ++z) {
            for (std::int64_t y = 0; y < fine_dims.h; ++y) {
                for (std::int64_t x = 0; x < fine_dims.w; ++x) {
                    // cell-centered mapping consistent with 2x average pooling
                    const double cz = (static_cast<double>(z) - 0.5) / 2.0;
                    const double cy = (static_cast<double>(y) - 0.5) / 2.0;
                    const double cx = (static_cast<double>(x) - 0.5) / 2.0;
                    const std::size_t i =
                        (static_cast<std::size_t>(z) * fine_dims.h + y) * fine_dims.w + x;
                    out[comp * fn + i] = 2.0 * sample_trilinear(cvol, cz, cy, cx).value;
                }
            }
        }
    }
    return fine;
}

namespace {

struct PyramidLevel {
    Volume3D fixed;
    Volume3D moving;
};

}  // namespace

RegistrationResult register_pair(const Volume3D& fixed, const Volume3D& moving,
                                 const RegistrationConfig& cfg) {
    cfg.validate();
    if (!(fixed.dims() == moving.dims()))
        throw std::invalid_argument("register: fixed/moving dims mismatch");
    const auto t0 = std::chrono::steady_clock::now();

    // Coarse-to-fine image pyramid; level 0 is full resolution.
    std::vector<PyramidLevel> pyramid;
    pyramid.push_back({fixed, moving});
    for (int l = 1; l < cfg.pyramid_levels; ++l) {
        const PyramidLevel& prev = pyramid.back();
        const Dims3 pd = prev.fixed.dims();
        if (pd.d < 2 && pd.h < 2 && pd.w < 2) break;
        pyramid.push_back({downsample_average(prev.fixed), downsample_average(prev.moving)});
    }
    const int levels = static_cast<int>(pyramid.size());
    const int per_level = cfg.iterations / levels;
    const int remainder = cfg.iterations % levels;  // extra iterations go to the finest level

    RegistrationResult result;
    result.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));

    DisplacementField field(pyramid.back().fixed.dims(), pyramid.back().fixed.spacing());
    int iteration = 0;
    for (int l = levels - 1; l >= 0; --l) {
        const PyramidLevel& lvl = pyramid[static_cast<std::size_t>(l)];
        const std::size_t ncomp = 3 * lvl.fixed.dims().voxels();
        std::vector<double> m(ncomp, 0.0), v(ncomp, 0.0);
        DisplacementField grad(lvl.fixed.dims(), lvl.fixed.spacing());

        const int iters = per_level + (l == 0 ? remainder : 0);
        for (int it = 0; it < iters; ++it) {
            const LossTerms terms =
                total_loss_and_grad(lvl.fixed, lvl.moving, field, cfg.loss, &grad);
            if (!std::isfinite(terms.total))
                throw std::runtime_error("registration diverged at iteration " +
                                         std::to_string(iteration));
            result.loss_trace.push_back(TraceEntry{iteration, l, terms});
            ++iteration;

            const double bc1 = 1.0 - std::pow(cfg.beta1, it + 1);
            const double bc2 = 1.0 - std::pow(cfg.beta2, it + 1);
            std::vector<double>& u = field.mutable_components();
            const std::vector<double>& g = grad.components();
            for (std::size_t i = 0; i < ncomp; ++i) {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                u[i] -= cfg.step_size * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
            }
        }
        if (l > 0) {
            const PyramidLevel& finer = pyramid[static_cast<std::size_t>(l - 1)];
            field = upsample_field(field, finer.fixed.dims(), finer.fixed.spacing());
        }
    }

    result.field = std::move(field);
    result.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

RegistrationResult register_pair(const Volume3D& fixed, const Volume3D& moving,
                                 const RegistrationConfig& cfg, const LabelMap& fixed_labels,
                                 const LabelMap& moving_labels) {
    RegistrationResult result = register_pair(fixed, moving, cfg);
    const LabelMap warped = warp_labels(moving_labels, result.field);
    result.metrics = evaluate_registration(fixed_labels, warped, result.field);
    return result;
}

SynthKind parse_synth_kind(const std::string& name) {
    if (name == "translate") return SynthKind::translate;
    if (name == "scale") return SynthKind::scale;
    if (name == "swirl") return SynthKind::swirl;
    throw std::invalid_argument("unknown synth kind: " + name);
}

namespace {

struct Phantom {
    Dims3 dims;
    double cz, cy, cx;       // center
    double az, ay, ax;       // ellipsoid semi-axes (in-plane anisotropic)
    struct Wave {
        double kz, ky, kx, phase, amp;
    };
    std::vector<Wave> waves;

    double rho(double z, double y, double x) const {
        const double dz = (z - cz) / az, dy = (y - cy) / ay, dx = (x - cx) / ax;
        return std::sqrt(dz * dz + dy * dy + dx * dx);
    }
    double value(double z, double y, double x) const {
        const double r = rho(z, y, x);
        // intensity steps at both label boundaries so the similarity term can
        // see them, plus a gradient and seeded texture for interior signal
        const double outer = 1.0 / (1.0 + std::exp((r - 1.0) * 20.0));
        const double core = 1.0 / (1.0 + std::exp((r - 0.55) * 20.0));
        double tex = 0.0;
        for (const Wave& w : waves)
            tex += w.amp * std::cos(w.kz * z + w.ky * y + w.kx * x + w.phase);
        const double grad = x / std::max<double>(1.0, static_cast<double>(dims.w - 1));
        return 0.17 + 0.42 * outer + 0.16 * core + 0.06 * grad + tex;
    }
    std::uint32_t label(double z, double y, double x) const {
        const double r = rho(z, y, x);
        if (r <= 0.55) return 2;
        if (r <= 1.0) return 1;
        return 0;
    }
};

Phantom make_phantom(const Dims3& dims, std::uint64_t seed) {
    Phantom ph;
    ph.dims = dims;
    ph.cz = static_cast<double>(dims.d - 1) / 2.0;
    ph.cy = static_cast<double>(dims.h - 1) / 2.0;
    ph.cx = static_cast<double>(dims.w - 1) / 2.0;
    ph.az = std::max(1.0, 0.40 * static_cast<double>(dims.d - 1));
    ph.ay = std::max(1.0, 0.40 * static_cast<double>(dims.h - 1));
    ph.ax = std::max(1.0, 0.24 * static_cast<double>(dims.w - 1));
    std::mt19937_64 rng(seed);
    // wavelengths long enough that trilinear resampling preserves the
    // pattern, short enough to localize displacements within the window
    std::uniform_real_distribution<double> wavelen(9.0, 16.0);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    for (int i = 0; i < 7; ++i) {
        Phantom::Wave w;
        const double lz = wavelen(rng), ly = wavelen(rng), lx = wavelen(rng);
        w.kz = 2.0 * std::numbers::pi / lz;
        w.ky = 2.0 * std::numbers::pi / ly;
        w.kx = 2.0 * std::numbers::pi / lx;
        w.phase = angle(rng);
        w.amp = 0.12 / 7.0;
        ph.waves.push_back(w);
    }
    return ph;
}

struct Deformation {
    SynthKind kind;
    double mz = 0, my = 0, mx = 0;  // translate offsets or per-axis scale factors
    double swirl_angle = 0;
    double cz = 0, cy = 0, cx = 0;
    double sigma = 1;

    // T(p) = p + u(p), components in voxel units (z, y, x)
    void map(double z, double y, double x, double& tz, double& ty, double& tx) const {
        switch (kind) {
            case SynthKind::translate:
                tz = z + mz;
                ty = y + my;
                tx = x + mx;
                return;
            case SynthKind::scale:
                tz = cz + mz * (z - cz);
                ty = cy + my * (y - cy);
                tx = cx + mx * (x - cx);
                return;
            case SynthKind::swirl: {
                const double dy = y - cy, dx = x - cx;
                const double r2 = dy * dy + dx * dx;
                const double theta = swirl_angle * std::exp(-r2 / (2.0 * sigma * sigma));
                const double ct = std::cos(theta), st = std::sin(theta);
                tz = z;
                ty = cy + dy * ct - dx * st;
                tx = cx + dy * st + dx * ct;
                return;
            }
        }
        tz = z; ty = y; tx = x;
    }
};

Deformation make_deformation(SynthKind kind, const Dims3& dims,
                             const std::vector<double>& magnitude) {
    Deformation def;
    def.kind = kind;
    def.cz = static_cast<double>(dims.d - 1) / 2.0;
    def.cy = static_cast<double>(dims.h - 1) / 2.0;
    def.cx = static_cast<double>(dims.w - 1) / 2.0;
    switch (kind) {
        case SynthKind::translate:
            if (magnitude.size() != 3)
                throw std::invalid_argument("translate magnitude must be a (z,y,x) triple");
            def.mz = magnitude[0];
            def.my = magnitude[1];
            def.mx = magnitude[2];
            break;
        case SynthKind::scale: {
            std::vector<double> f = magnitude;
            if (f.size() == 1) f = {f[0], f[0], f[0]};
            if (f.size() != 3)
                throw std::invalid_argument("scale magnitude must be one factor or a triple");
            for (double s : f)
                if (!(s > 0.0))
                    throw std::invalid_argument("magnitude exceeds the fold-free bound");
            def.mz = f[0];
            def.my = f[1];
            def.mx = f[2];
            break;
        }
        case SynthKind::swirl:
            if (magnitude.size() != 1)
                throw std::invalid_argument("swirl magnitude must be a single angle (radians)");
            if (std::abs(magnitude[0]) > 1.0)
                throw std::invalid_argument("magnitude exceeds the fold-free bound");
            def.swirl_angle = magnitude[0];
            def.sigma =
                0.25 * static_cast<double>(std::min(dims.h - 1, dims.w - 1));
            break;
    }
    return def;
}

}  // namespace

SynthPair synth_pair(SynthKind kind, const Dims3& dims, const std::vector<double>& magnitude,
                     std::uint64_t seed) {
    if (dims.d < 2 || dims.h < 2 || dims.w < 2)
        throw std::invalid_argument("synth dims must be >= 2 on every axis");
    const Phantom ph = make_phantom(dims, seed);
    const Deformation def = make_deformation(kind, dims, magnitude);
    const Spacing3 spacing{};  // unit spacing

    const std::size_t n = dims.voxels();
    std::vector<double> mov(n), fix(n);
    std::vector<std::uint32_t> lab_m(n), lab_f(n);
    std::vector<double> truth(3 * n);
    std::size_t i = 0;
    for (std::int64_t z = 0; z < dims.d; ++z) {
        for (std::int64_t y = 0; y < dims.h; ++y) {
            for (std::int64_t x = 0; x < dims.w; ++x, ++i) {
                const auto dz = static_cast<double>(z);
                const auto dy = static_cast<double>(y);
                const auto dx = static_cast<double>(x);
                mov[i] = ph.value(dz, dy, dx);
                lab_m[i] = ph.label(dz, dy, dx);
                double tz, ty, tx;
                def.map(dz, dy, dx, tz, ty, tx);
                fix[i] = ph.value(tz, ty, tx);
                lab_f[i] = ph.label(tz, ty, tx);
                truth[i] = tz - dz;
                truth[n + i] = ty - dy;
                truth[2 * n + i] = tx - dx;
            }
        }
    }
    SynthPair pair{Volume3D(dims, spacing, std::move(fix)), Volume3D(dims, spacing, std::move(mov)),
                   DisplacementField(dims, spacing, std::move(truth)),
                   LabelMap(dims, spacing, std::move(lab_f)), LabelMap(dims, spacing, std::move(lab_m))};
    return pair;
}

}  // namespace fractfield
