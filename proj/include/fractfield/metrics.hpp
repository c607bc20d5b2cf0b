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
#ifndef FRACTFIELD_METRICS_HPP
#define FRACTFIELD_METRICS_HPP

#include <cstdint>
#include <map>
#include <utility>

#include "fractfield/volume.hpp"
#include "fractfield/warp.hpp"

namespace fractfield {

struct MetricReport {
    std::map<std::uint32_t, double> per_label_dsc;
    double overall_dsc = 0.0;  // DSC of the union of nonbackground labels
    double avg_dsc = 0.0;      // unweighted mean of per-label DSC
    std::map<std::uint32_t, double> hd95_mm;
    double folding_pct = 0.0;
    double jacobian_std = 0.0;
};

/// 2|X n Y| / (|X| + |Y|) on the binary masks of one label; 1.0 when both
/// masks are empty.
double dsc(const LabelMap& x, const LabelMap& y, std::uint32_t label);

/// overall: DSC of the union of all nonbackground (nonzero) labels.
/// avg: unweighted mean of per-label DSC over the union of nonbackground
/// label sets. Errors when no nonbackground label exists.
std::pair<double, double> overall_and_avg_dsc(const LabelMap& x, const LabelMap& y);

/// 95th percentile (linear-interpolation order statistics) of the union of
/// both directed boundary nearest-neighbor distance sets, in millimeters.
/// Boundary voxels are mask voxels with a six-connected nonmask neighbor;
/// grid edges count as boundary. Errors on an empty mask.
double hd95(const LabelMap& x, const LabelMap& y, std::uint32_t label, const Spacing3& spacing);

/// Percent of voxels with det(I + grad u) <= 0.
double folding_fraction(const DisplacementField& field);

/// Population standard deviation of the Jacobian determinant. The one-sided
/// boundary ring is excluded by default; include_boundary = true evaluates
/// the entire domain.
double jacobian_std(const DisplacementField& field, bool include_boundary = false);

/// Full report for a (fixed labels, warped labels, field) triple.
MetricReport evaluate_registration(const LabelMap& fixed_labels, const LabelMap& warped_labels,
                                   const DisplacementField& field);

}  // namespace fractfield

#endif
