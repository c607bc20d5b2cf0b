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
#ifndef FRACTFIELD_DFRFT_HPP
#define FRACTFIELD_DFRFT_HPP

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "fractfield/volume.hpp"

namespace fractfield {

/// Fractional order p with its rotation angle alpha = p*pi/2. The transform
/// family is periodic with period 4 in p; canonical() folds into [0, 4).
struct FrftOrder {
    double p = 0.0;

    double canonical() const;
    double angle() const;
    FrftOrder operator-() const { return FrftOrder{-p}; }
};

/// Orthonormal discrete Hermite-Gaussian eigenbasis for one axis length,
/// plus a cache of per-order spectral kernels
///
///   K_p[m,n] = sum_k u_k[m] * exp(-j*(pi/2)*p*k) * u_k[n].
///
/// The basis columns are eigenvectors of the DFT-commuting matrix with
/// diagonal 2*cos(2*pi*n/N), unit super-/sub-diagonals and unit corner
/// couplings, split into index-reversal parity classes so eigenvector
/// assignment is deterministic. Hermite indices k follow the even/odd-N
/// rule: even N uses {0..N-2, N} (N-1 is skipped), odd N uses {0..N-1}.
class FrftPlan {
public:
    explicit FrftPlan(std::int64_t n);

    std::int64_t size() const { return n_; }
    /// Columns ordered by Hermite index; each column's first entry with
    /// |entry| > 1e-12 is positive.
    const Eigen::MatrixXd& basis() const { return basis_; }
    const std::vector<int>& eig_indices() const { return eig_indices_; }

    /// Kernel for the canonicalized order; computed once per distinct order
    /// and safe for concurrent readers afterwards.
    const Eigen::MatrixXcd& kernel(FrftOrder p) const;

private:
    std::int64_t n_;
    Eigen::MatrixXd basis_;
    std::vector<int> eig_indices_;
    mutable std::mutex cache_mutex_;
    mutable std::map<double, std::unique_ptr<Eigen::MatrixXcd>> kernel_cache_;
};

using FrftPlanPtr = std::shared_ptr<const FrftPlan>;

/// Plan construction with a process-wide cache per axis length. n >= 2.
FrftPlanPtr build_plan(std::int64_t n);

/// Per-axis plans for one volume shape. Length-1 axes carry no plan: the
/// transform on such an axis is the identity.
struct AxisPlans {
    FrftPlanPtr z, y, x;
};
AxisPlans make_axis_plans(const Dims3& dims);

/// 1D transform X_p[m] = sum_k K_p[m,k] x[k]; norm-preserving.
std::vector<std::complex<double>> frft_1d(const FrftPlan& plan,
                                          const std::vector<std::complex<double>>& x, FrftOrder p);

/// Separable 3D transform: 1D transforms along x, then y, then z.
ComplexVolume3D frft_3d(const ComplexVolume3D& v, FrftOrder p, const AxisPlans& plans);
/// Inverse: frft_3d at order -p.
ComplexVolume3D ifrft_3d(const ComplexVolume3D& X, FrftOrder p, const AxisPlans& plans);

ComplexVolume3D to_complex(const Volume3D& v);

/// Splits X into the log-magnitude A = log(1 + |X|) and a unit-modulus
/// phase factor (phase = 1 where |X| < 1e-300 so inversion is defined).
struct LogMagnitude {
    Volume3D magnitude;
    ComplexVolume3D phase;
};
LogMagnitude log_magnitude(const ComplexVolume3D& X, const Spacing3& spacing = Spacing3{});

/// Recombines (exp(A) - 1) * phase. A must be element-wise >= 0.
ComplexVolume3D inv_log_magnitude(const Volume3D& A, const ComplexVolume3D& phase);

}  // namespace fractfield

#endif
