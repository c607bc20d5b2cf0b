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
#include "fractfield/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fractfield/parallel.hpp"

namespace fractfield {

void LossConfig::validate() const {
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("CC window must be odd and >= 1");
    if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
}

namespace {

// In-place zero-padded box sum (not mean) of radius r along each axis,
// via per-line prefix sums. Exact same operation order on every run.
void box_sum_axis(std::vector<double>& a, const Dims3& d, int r, int axis) {
    const std::size_t len = axis == 0 ? d.d : axis == 1 ? d.h : d.w;
    const std::size_t stride = axis == 0 ? static_cast<std::size_t>(d.h) * d.w
                               : axis == 1 ? static_cast<std::size_t>(d.w)
                                           : 1;
    const std::size_t nlines = a.size() / len;
    std::vector<std::size_t> line_base(nlines);
    {
        std::size_t li = 0;
        if (axis == 0) {
            for (std::size_t i = 0; i < static_cast<std::size_t>(d.h) * d.w; ++i) line_base[li++] = i;
        } else if (axis == 1) {
            for (std::int64_t z = 0; z < d.d; ++z)
                for (std::int64_t x = 0; x < d.w; ++x)
                    line_base[li++] = static_cast<std::size_t>(z) * d.h * d.w + x;
        } else {
            for (std::size_t i = 0; i < nlines; ++i) line_base[li++] = i * len;
        }
    }
    parallel_for_chunks(0, nlines, 64, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> prefix(len + 1);
        for (std::size_t l = lo; l < hi; ++l) {
            const std::size_t base = line_base[l];
            prefix[0] = 0.0;
            for (std::size_t i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + a[base + i * stride];
            for (std::size_t i = 0; i < len; ++i) {
                const std::size_t hi_idx = std::min(i + static_cast<std::size_t>(r) + 1, len);
                const std::size_t lo_idx = i >= static_cast<std::size_t>(r) ? i - r : 0;
                a[base + i * stride] = prefix[hi_idx] - prefix[lo_idx];
            }
        }
    });
}

std::vector<double> box_sum(const std::vector<double>& v, const Dims3& d, int n) {
    std::vector<double> out = v;
    const int r = n / 2;
    if (r == 0) return out;
    box_sum_axis(out, d, r, 2);
    box_sum_axis(out, d, r, 1);
    box_sum_axis(out, d, r, 0);
    return out;
}

struct CcFields {
    std::vector<double> cross, varf, varw, sf, sw;
};

CcFields cc_window_sums(const std::vector<double>& fixed, const std::vector<double>& warped,
                        const Dims3& d, int n) {
    const std::size_t nvox = d.voxels();
    const double n3 = static_cast<double>(n) * n * n;
    std::vector<double> ff(nvox), ww(nvox), fw(nvox);
    for (std::size_t i = 0; i < nvox; ++i) {
        ff[i] = fixed[i] * fixed[i];
        ww[i] = warped[i] * warped[i];
        fw[i] = fixed[i] * warped[i];
    }
    CcFields c;
    c.sf = box_sum(fixed, d, n);
    c.sw = box_sum(warped, d, n);
    c.cross = box_sum(fw, d, n);
    c.varf = box_sum(ff, d, n);
    c.varw = box_sum(ww, d, n);
    for (std::size_t i = 0; i < nvox; ++i) {
        c.cross[i] -= c.sf[i] * c.sw[i] / n3;
        c.varf[i] -= c.sf[i] * c.sf[i] / n3;
        c.varw[i] -= c.sw[i] * c.sw[i] / n3;
    }
    return c;
}

}  // namespace

Volume3D local_means(const Volume3D& v, int n) {
    if (n < 1 || n % 2 == 0) throw std::invalid_argument("local_means window must be odd");
    std::vector<double> out = box_sum(v.data(), v.dims(), n);
    const double inv = 1.0 / (static_cast<double>(n) * n * n);
    for (double& x : out) x *= inv;
    return Volume3D(v.dims(), v.spacing(), std::move(out));
}

double local_cc(const Volume3D& fixed, const Volume3D& warped, const LossConfig& cfg) {
    cfg.validate();
    if (!(fixed.dims() == warped.dims()))
        throw std::invalid_argument("local_cc: image dims mismatch");
    const Dims3 d = fixed.dims();
    const CcFields c = cc_window_sums(fixed.data(), warped.data(), d, cfg.window);
    const double eps = cfg.epsilon;
    return parallel_sum(d.voxels(), 4096, [&](std::size_t i) {
        return c.cross[i] * c.cross[i] / ((c.varf[i] + eps) * (c.varw[i] + eps));
    });
}

double similarity_loss(const Volume3D& fixed, const Volume3D& moving,
                       const DisplacementField& field, const LossConfig& cfg) {
    return -local_cc(fixed, warp_image(moving, field), cfg);
}

double smoothness_loss(const DisplacementField& field) {
    const Dims3 d = field.dims();
    const std::size_t nvox = d.voxels();
    const std::size_t stride[3] = {static_cast<std::size_t>(d.h) * d.w,
                                   static_cast<std::size_t>(d.w), 1};
    const std::int64_t len[3] = {d.d, d.h, d.w};
    const double* u = field.components().data();

    return parallel_sum(nvox, 4096, [&](std::size_t i) {
        const std::int64_t x = static_cast<std::int64_t>(i) % d.w;
        const std::int64_t y = (static_cast<std::int64_t>(i) / d.w) % d.h;
        const std::int64_t z = static_cast<std::int64_t>(i) / (d.w * d.h);
        const std::int64_t pos[3] = {z, y, x};
        double acc = 0.0;
        for (int comp = 0; comp < 3; ++comp) {
            const double* c = u + static_cast<std::size_t>(comp) * nvox;
            for (int ax = 0; ax < 3; ++ax) {
                if (pos[ax] + 1 < len[ax]) {
                    const double diff = c[i + stride[ax]] - c[i];
                    acc += diff * diff;
                }
            }
        }
        return acc;
    });
}

double total_loss(const Volume3D& fixed, const Volume3D& moving, const DisplacementField& field,
                  const LossConfig& cfg) {
    return total_loss_and_grad(fixed, moving, field, cfg, nullptr).total;
}

LossTerms total_loss_and_grad(const Volume3D& fixed, const Volume3D& moving,
                              const DisplacementField& field, const LossConfig& cfg,
                              DisplacementField* grad) {
    cfg.validate();
    if (!(fixed.dims() == moving.dims()) || !(fixed.dims() == field.dims()))
        throw std::invalid_argument("total_loss: dims mismatch");
    field.validate_finite();
    const Dims3 d = fixed.dims();
    const std::size_t nvox = d.voxels();
    const double n3 = static_cast<double>(cfg.window) * cfg.window * cfg.window;
    const double eps = cfg.epsilon;

    // Warp pass; keep the sampling derivatives for the chain rule.
    std::vector<double> warped(nvox), gz(nvox), gy(nvox), gx(nvox);
    parallel_for_chunks(0, nvox, 4096, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const std::int64_t x = static_cast<std::int64_t>(i) % d.w;
            const std::int64_t y = (static_cast<std::int64_t>(i) / d.w) % d.h;
            const std::int64_t z = static_cast<std::int64_t>(i) / (d.w * d.h);
            const TrilinearSample s =
                sample_trilinear(moving, static_cast<double>(z) + field.uz(i),
                                 static_cast<double>(y) + field.uy(i),
                                 static_cast<double>(x) + field.ux(i));
            warped[i] = s.value;
            gz[i] = s.dz;
            gy[i] = s.dy;
            gx[i] = s.dx;
            if (!std::isfinite(s.value))
                throw std::runtime_error("non-finite warped intensity at voxel (" +
                                         std::to_string(z) + "," + std::to_string(y) + "," +
                                         std::to_string(x) + ")");
        }
    });

    const CcFields c = cc_window_sums(fixed.data(), warped, d, cfg.window);
    const double cc = parallel_sum(nvox, 4096, [&](std::size_t i) {
        return c.cross[i] * c.cross[i] / ((c.varf[i] + eps) * (c.varw[i] + eps));
    });

    LossTerms terms;
    terms.similarity = -cc;
    terms.smoothness = smoothness_loss(field);
    terms.total = terms.similarity + cfg.lambda * terms.smoothness;

    if (grad == nullptr) return terms;
    if (!(grad->dims() == d)) *grad = DisplacementField(d, field.spacing());

    // dCC/dWarped(q) gathers the per-window factors
    //   A = 2*cross/(uf*uw), C = 2*cross^2/(uf*uw^2)
    // over every window containing q:
    //   dCC/dW(q) = fixed(q)*box(A) - box(A*meanf) - W(q)*box(C) + box(C*meanw).
    std::vector<double> a(nvox), c_fac(nvox), a_mf(nvox), c_mw(nvox);
    for (std::size_t i = 0; i < nvox; ++i) {
        const double uf = c.varf[i] + eps;
        const double uw = c.varw[i] + eps;
        a[i] = 2.0 * c.cross[i] / (uf * uw);
        c_fac[i] = 2.0 * c.cross[i] * c.cross[i] / (uf * uw * uw);
        a_mf[i] = a[i] * (c.sf[i] / n3);
        c_mw[i] = c_fac[i] * (c.sw[i] / n3);
    }
    const std::vector<double> box_a = box_sum(a, d, cfg.window);
    const std::vector<double> box_amf = box_sum(a_mf, d, cfg.window);
    const std::vector<double> box_c = box_sum(c_fac, d, cfg.window);
    const std::vector<double> box_cmw = box_sum(c_mw, d, cfg.window);

    const std::size_t stride[3] = {static_cast<std::size_t>(d.h) * d.w,
                                   static_cast<std::size_t>(d.w), 1};
    const std::int64_t len[3] = {d.d, d.h, d.w};
    const double* u = field.components().data();
    double* g = grad->mutable_components().data();

    parallel_for_chunks(0, nvox, 4096, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const std::int64_t x = static_cast<std::int64_t>(i) % d.w;
            const std::int64_t y = (static_cast<std::int64_t>(i) / d.w) % d.h;
            const std::int64_t z = static_cast<std::int64_t>(i) / (d.w * d.h);
            const std::int64_t pos[3] = {z, y, x};

            const double dsim = -(fixed.data()[i] * box_a[i] - box_amf[i] -
                                  warped[i] * box_c[i] + box_cmw[i]);
            const double gw[3] = {gz[i], gy[i], gx[i]};
            for (int comp = 0; comp < 3; ++comp) {
                const double* uc = u + static_cast<std::size_t>(comp) * nvox;
                double gs = 0.0;
                for (int ax = 0; ax < 3; ++ax) {
                    if (pos[ax] > 0) gs += 2.0 * (uc[i] - uc[i - stride[ax]]);
                    if (pos[ax] + 1 < len[ax]) gs -= 2.0 * (uc[i + stride[ax]] - uc[i]);
                }
                const double val = dsim * gw[comp] + cfg.lambda * gs;
                if (!std::isfinite(val))
                    throw std::runtime_error("non-finite gradient at voxel (" + std::to_string(z) +
                                             "," + std::to_string(y) + "," + std::to_string(x) +
                                             ")");
                g[static_cast<std::size_t>(comp) * nvox + i] = val;
            }
        }
    });
    return terms;
}

DisplacementField total_loss_grad(const Volume3D& fixed, const Volume3D& moving,
                                  const DisplacementField& field, const LossConfig& cfg) {
    DisplacementField grad(field.dims(), field.spacing());
    total_loss_and_grad(fixed, moving, field, cfg, &grad);
    return grad;
}

}  // namespace fractfield
