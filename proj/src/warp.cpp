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
#include "fractfield/warp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fractfield/parallel.hpp"

namespace fractfield {

DisplacementField::DisplacementField(Dims3 dims, Spacing3 spacing)
    : dims_(dims), spacing_(spacing), u_(3 * dims.voxels(), 0.0) {
    if (dims.d < 1 || dims.h < 1 || dims.w < 1)
        throw std::invalid_argument("field dims must all be >= 1");
}

DisplacementField::DisplacementField(Dims3 dims, Spacing3 spacing, std::vector<double> components)
    : dims_(dims), spacing_(spacing), u_(std::move(components)) {
    if (dims.d < 1 || dims.h < 1 || dims.w < 1)
        throw std::invalid_argument("field dims must all be >= 1");
    if (u_.size() != 3 * dims_.voxels())
        throw std::invalid_argument("field component array length must be 3*D*H*W");
}

void DisplacementField::validate_finite() const {
    for (double v : u_)
        if (!std::isfinite(v)) throw std::invalid_argument("displacement field is not finite");
}

TrilinearSample sample_trilinear(const Volume3D& img, double cz, double cy, double cx) {
    const Dims3 d = img.dims();
    const double zc = std::clamp(cz, 0.0, static_cast<double>(d.d - 1));
    const double yc = std::clamp(cy, 0.0, static_cast<double>(d.h - 1));
    const double xc = std::clamp(cx, 0.0, static_cast<double>(d.w - 1));

    const std::int64_t z0 = d.d > 1 ? std::min(static_cast<std::int64_t>(zc), d.d - 2) : 0;
    const std::int64_t y0 = d.h > 1 ? std::min(static_cast<std::int64_t>(yc), d.h - 2) : 0;
    const std::int64_t x0 = d.w > 1 ? std::min(static_cast<std::int64_t>(xc), d.w - 2) : 0;
    const double fz = zc - static_cast<double>(z0);
    const double fy = yc - static_cast<double>(y0);
    const double fx = xc - static_cast<double>(x0);

    const std::int64_t z1 = std::min(z0 + 1, d.d - 1);
    const std::int64_t y1 = std::min(y0 + 1, d.h - 1);
    const std::int64_t x1 = std::min(x0 + 1, d.w - 1);

    const double c000 = img.at(z0, y0, x0), c001 = img.at(z0, y0, x1);
    const double c010 = img.at(z0, y1, x0), c011 = img.at(z0, y1, x1);
    const double c100 = img.at(z1, y0, x0), c101 = img.at(z1, y0, x1);
    const double c110 = img.at(z1, y1, x0), c111 = img.at(z1, y1, x1);

    const double gz = 1.0 - fz, gy = 1.0 - fy, gx = 1.0 - fx;
    TrilinearSample s;
    s.value = gz * (gy * (gx * c000 + fx * c001) + fy * (gx * c010 + fx * c011)) +
              fz * (gy * (gx * c100 + fx * c101) + fy * (gx * c110 + fx * c111));
    s.dz = -(gy * (gx * c000 + fx * c001) + fy * (gx * c010 + fx * c011)) +
           (gy * (gx * c100 + fx * c101) + fy * (gx * c110 + fx * c111));
    s.dy = gz * (-(gx * c000 + fx * c001) + (gx * c010 + fx * c011)) +
           fz * (-(gx * c100 + fx * c101) + (gx * c110 + fx * c111));
    s.dx = gz * (gy * (c001 - c000) + fy * (c011 - c010)) +
           fz * (gy * (c101 - c100) + fy * (c111 - c110));

    // Zero derivative where the clamp is active (or the axis is degenerate).
    if (!(cz > 0.0 && cz < static_cast<double>(d.d - 1))) s.dz = 0.0;
    if (!(cy > 0.0 && cy < static_cast<double>(d.h - 1))) s.dy = 0.0;
    if (!(cx > 0.0 && cx < static_cast<double>(d.w - 1))) s.dx = 0.0;
    return s;
}

Volume3D warp_image(const Volume3D& moving, const DisplacementField& field) {
    if (!(moving.dims() == field.dims()))
        throw std::invalid_argument("warp_image: image/field dims mismatch");
    field.validate_finite();
    const Dims3 d = moving.dims();
    std::vector<double> out(d.voxels());
    parallel_for_chunks(0, static_cast<std::size_t>(d.d), 1, [&](std::size_t z0, std::size_t z1) {
        for (std::size_t z = z0; z < z1; ++z) {
            for (std::int64_t y = 0; y < d.h; ++y) {
                for (std::int64_t x = 0; x < d.w; ++x) {
                    const std::size_t i = field.index(static_cast<std::int64_t>(z), y, x);
                    out[i] = sample_trilinear(moving, static_cast<double>(z) + field.uz(i),
                                              static_cast<double>(y) + field.uy(i),
                                              static_cast<double>(x) + field.ux(i))
                                 .value;
                }
            }
        }
    });
    return Volume3D(d, moving.spacing(), std::move(out));
}

LabelMap warp_labels(const LabelMap& moving, const DisplacementField& field) {
    if (!(moving.dims() == field.dims()))
        throw std::invalid_argument("warp_labels: labels/field dims mismatch");
    field.validate_finite();
    const Dims3 d = moving.dims();
    std::vector<std::uint32_t> out(d.voxels());
    parallel_for_chunks(0, static_cast<std::size_t>(d.d), 1, [&](std::size_t z0, std::size_t z1) {
        for (std::size_t z = z0; z < z1; ++z) {
            for (std::int64_t y = 0; y < d.h; ++y) {
                for (std::int64_t x = 0; x < d.w; ++x) {
                    const std::size_t i = field.index(static_cast<std::int64_t>(z), y, x);
                    const auto nz = static_cast<std::int64_t>(std::llround(
                        std::clamp(static_cast<double>(z) + field.uz(i), 0.0,
                                   static_cast<double>(d.d - 1))));
                    const auto ny = static_cast<std::int64_t>(std::llround(
                        std::clamp(static_cast<double>(y) + field.uy(i), 0.0,
                                   static_cast<double>(d.h - 1))));
                    const auto nx = static_cast<std::int64_t>(std::llround(
                        std::clamp(static_cast<double>(x) + field.ux(i), 0.0,
                                   static_cast<double>(d.w - 1))));
                    out[i] = moving.labels()[moving.index(nz, ny, nx)];
                }
            }
        }
    });
    return LabelMap(d, moving.spacing(), std::move(out));
}

Volume3D jacobian_determinant(const DisplacementField& field) {
    const Dims3 d = field.dims();
    if (d.d < 2 || d.h < 2 || d.w < 2)
        throw std::invalid_argument("jacobian_determinant requires every axis length >= 2");
    field.validate_finite();

    const std::size_t n = d.voxels();
    const std::size_t stride_y = static_cast<std::size_t>(d.w);
    const std::size_t stride_z = static_cast<std::size_t>(d.h) * stride_y;
    const double* uz = field.components().data();
    const double* uy = uz + n;
    const double* ux = uy + n;

    std::vector<double> det(n);
    parallel_for_chunks(0, static_cast<std::size_t>(d.d), 1, [&](std::size_t zlo, std::size_t zhi) {
        for (std::size_t zz = zlo; zz < zhi; ++zz) {
            const auto z = static_cast<std::int64_t>(zz);
            for (std::int64_t y = 0; y < d.h; ++y) {
                for (std::int64_t x = 0; x < d.w; ++x) {
                    const std::size_t i = field.index(z, y, x);
                    double j[3][3];
                    const double* comp[3] = {uz, uy, ux};
                    for (int a = 0; a < 3; ++a) {
                        for (int b = 0; b < 3; ++b) {
                            std::int64_t pos;
                            std::int64_t len;
                            std::size_t stride;
                            switch (b) {
                                case 0: pos = z; len = d.d; stride = stride_z; break;
                                case 1: pos = y; len = d.h; stride = stride_y; break;
                                default: pos = x; len = d.w; stride = 1; break;
                            }
                            double g;
                            if (pos == 0)
                                g = comp[a][i + stride] - comp[a][i];
                            else if (pos == len - 1)
                                g = comp[a][i] - comp[a][i - stride];
                            else
                                g = 0.5 * (comp[a][i + stride] - comp[a][i - stride]);
                            j[a][b] = g + (a == b ? 1.0 : 0.0);
                        }
                    }
                    det[i] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                             j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                             j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                }
            }
        }
    });
    return Volume3D(d, field.spacing(), std::move(det));
}

DisplacementField load_field(const std::string& path) {
    const io::RawHeader h = io::read_header(path);
    if (h.components != 3)
        throw std::runtime_error("expected a displacement field (components=3): " + path);
    std::vector<double> values = io::read_payload(h, path);
    DisplacementField f(h.dims, h.spacing, std::move(values));
    f.validate_finite();
    return f;
}

void save_field(const DisplacementField& f, const std::string& path, const std::string& dtype) {
    if (dtype != "f32" && dtype != "f64")
        throw std::invalid_argument("field dtype must be f32 or f64");
    io::RawHeader h{f.dims(), f.spacing(), dtype, 3};
    io::write_header(h, path);
    io::write_payload(h, path, f.components());
}

}  // namespace fractfield
