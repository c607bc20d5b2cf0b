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
#ifndef FRACTFIELD_LOSSES_HPP
#define FRACTFIELD_LOSSES_HPP

#include "fractfield/volume.hpp"
#include "fractfield/warp.hpp"

namespace fractfield {

struct LossConfig {
    int window = 9;        // local CC window side, odd
    double lambda = 1.0;   // smoothness weight
    double epsilon = 1e-5; // stabilizer added to both CC denominator factors

    void validate() const;
};

/// Box-filtered local mean over n^3 neighborhoods, zero padding outside the
/// grid, constant divisor n^3 (boundary windows are biased toward zero).
Volume3D local_means(const Volume3D& v, int n);

/// Windowed local cross-correlation: per voxel the squared normalized
/// covariance, summed over the grid. Range [0, |domain|] with epsilon > 0.
double local_cc(const Volume3D& fixed, const Volume3D& warped, const LossConfig& cfg);

/// L_sim = -CC(fixed, moving warped by field).
double similarity_loss(const Volume3D& fixed, const Volume3D& moving,
                       const DisplacementField& field, const LossConfig& cfg);

/// Diffusion regularizer: sum of squared forward differences of all three
/// components along all three axes (the difference at the last index of an
/// axis is omitted).
double smoothness_loss(const DisplacementField& field);

/// L_total = L_sim + lambda * L_smooth.
double total_loss(const Volume3D& fixed, const Volume3D& moving, const DisplacementField& field,
                  const LossConfig& cfg);

struct LossTerms {
    double total = 0.0;
    double similarity = 0.0;
    double smoothness = 0.0;
};

/// Evaluates the objective and, when grad is non-null, its analytic gradient
/// with respect to every displacement component. The warp derivative uses
/// the exact trilinear-weight derivatives (clamped samples contribute zero).
LossTerms total_loss_and_grad(const Volume3D& fixed, const Volume3D& moving,
                              const DisplacementField& field, const LossConfig& cfg,
                              DisplacementField* grad);

DisplacementField total_loss_grad(const Volume3D& fixed, const Volume3D& moving,
                                  const DisplacementField& field, const LossConfig& cfg);

}  // namespace fractfield

#endif
