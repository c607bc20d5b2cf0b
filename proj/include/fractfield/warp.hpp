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
#ifndef FRACTFIELD_WARP_HPP
#define FRACTFIELD_WARP_HPP

#include <string>
#include <vector>

#include "fractfield/volume.hpp"

namespace fractfield {

/// Dense per-voxel displacement u = (u_z, u_y, u_x) in voxel units. The
/// mapping it represents is p -> p + u(p). Storage is component-planar
/// (all u_z, then u_y, then u_x), matching the field file format.
class DisplacementField {
public:
    DisplacementField() = default;
    DisplacementField(Dims3 dims, Spacing3 spacing);  // zero field
    DisplacementField(Dims3 dims, Spacing3 spacing, std::vector<double> components);

    const Dims3& dims() const { return dims_; }
    const Spacing3& spacing() const { return spacing_; }
    std::size_t voxels() const { return dims_.voxels(); }

    const std::vector<double>& components() const { return u_; }
    std::vector<double>& mutable_components() { return u_; }

    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return (static_cast<std::size_t>(z) * dims_.h + static_cast<std::size_t>(y)) * dims_.w +
               static_cast<std::size_t>(x);
    }
    double uz(std::size_t i) const { return u_[i]; }
    double uy(std::size_t i) const { return u_[voxels() + i]; }
    double ux(std::size_t i) const { return u_[2 * voxels() + i]; }

    void validate_finite() const;

private:
    Dims3 dims_;
    Spacing3 spacing_;
    std::vector<double> u_;  // length 3*voxels
};

/// Trilinear sample of img at a continuous (z, y, x) coordinate, with
/// clamp-to-edge, plus the derivative of the sample w.r.t. each coordinate.
/// The derivative is zero where the clamp is active.
struct TrilinearSample {
    double value;
    double dz, dy, dx;
};
TrilinearSample sample_trilinear(const Volume3D& img, double cz, double cy, double cx);

/// I_w(p) = I_m(p + u(p)) by trilinear interpolation over the 8 neighbors.
Volume3D warp_image(const Volume3D& moving, const DisplacementField& field);

/// Nearest-neighbor label resampling at p + u(p).
LabelMap warp_labels(const LabelMap& moving, const DisplacementField& field);

/// Per-voxel det(I + grad u), central differences in the interior and
/// one-sided differences on the boundary, in voxel units. Needs every axis
/// length >= 2.
Volume3D jacobian_determinant(const DisplacementField& field);

/// Field files reuse the volume header format with components: 3 and a
/// component-planar payload.
DisplacementField load_field(const std::string& path);
void save_field(const DisplacementField& f, const std::string& path,
                const std::string& dtype = "f64");

}  // namespace fractfield

#endif
