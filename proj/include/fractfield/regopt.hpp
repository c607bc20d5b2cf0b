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
#ifndef FRACTFIELD_REGOPT_HPP
#define FRACTFIELD_REGOPT_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fractfield/losses.hpp"
#include "fractfield/metrics.hpp"
#include "fractfield/volume.hpp"
#include "fractfield/warp.hpp"

namespace fractfield {

struct RegistrationConfig {
    int iterations = 200;     // total across pyramid levels, split evenly
    double step_size = 0.25;  // voxels
    double beta1 = 0.9;       // adaptive-moment decay rates
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int pyramid_levels = 2;
    LossConfig loss;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TraceEntry {
    int iteration = 0;
    int level = 0;  // 0 = finest
    LossTerms terms;
};

struct RegistrationResult {
    DisplacementField field;
    std::vector<TraceEntry> loss_trace;  // one entry per iteration
    std::optional<MetricReport> metrics;
    double wall_time_seconds = 0.0;
};

/// Variational registration: the displacement field starts at zero and is
/// optimized with per-coordinate adaptive moments under the total loss.
/// With pyramid_levels > 1 optimization runs coarse to fine; the field is
/// upsampled trilinearly with displacement values doubled per level.
/// A non-finite loss aborts with the offending iteration index.
RegistrationResult register_pair(const Volume3D& fixed, const Volume3D& moving,
                                 const RegistrationConfig& cfg);

/// As above, plus a metric report computed from the given label maps by
/// warping the moving labels with the recovered field.
RegistrationResult register_pair(const Volume3D& fixed, const Volume3D& moving,
                                 const RegistrationConfig& cfg, const LabelMap& fixed_labels,
                                 const LabelMap& moving_labels);

enum class SynthKind { translate, scale, swirl };
SynthKind parse_synth_kind(const std::string& name);

struct SynthPair {
    Volume3D fixed;
    Volume3D moving;
    DisplacementField truth;
    LabelMap labels_f;
    LabelMap labels_m;
};

/// Analytic phantom pair: the moving image is a smooth ellipsoid phantom
/// with an intensity gradient and seeded smooth texture; the fixed image is
/// the same phantom evaluated at the deformed coordinates, so the ground
/// truth is exact. magnitude: translate takes (z, y, x) voxels; scale takes
/// one factor or per-axis factors about the center; swirl takes one in-plane
/// rotation angle in radians (Gaussian falloff from the center).
SynthPair synth_pair(SynthKind kind, const Dims3& dims, const std::vector<double>& magnitude,
                     std::uint64_t seed);

// Pyramid helpers (shared with the CLI; deterministic).
Volume3D downsample_average(const Volume3D& v);
/// Doubles the field resolution toward fine_dims: trilinear interpolation of
/// each component with displacement values scaled by 2.
DisplacementField upsample_field(const DisplacementField& coarse, const Dims3& fine_dims,
                                 const Spacing3& fine_spacing);

}  // namespace fractfield

#endif
