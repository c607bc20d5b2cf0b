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
#include "fractfield/dfrft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fractfield/parallel.hpp"

namespace fractfield {

double FrftOrder::canonical() const {
    double r = std::fmod(p, 4.0);
    if (r < 0.0) r += 4.0;
    return r;
}

double FrftOrder::angle() const { return p * std::numbers::pi / 2.0; }

namespace {

using Cplx = std::complex<double>;

Eigen::MatrixXd commuting_matrix(std::int64_t n) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
    for (std::int64_t i = 0; i < n; ++i) {
        s(i, i) = 2.0 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);
        s(i, (i + 1) % n) += 1.0;
        s(i, (i - 1 + n) % n) += 1.0;
    }
    return s;
}

// Orthonormal change of basis whose leading columns span the subspace fixed
// by index reversal m -> (N - m) mod N and trailing columns the antisymmetric
// one. Block-diagonalizes the commuting matrix exactly.
Eigen::MatrixXd parity_basis(std::int64_t n, std::int64_t& n_even) {
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(n, n);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    std::int64_t col = 0;
    v(0, col++) = 1.0;
    for (std::int64_t k = 1; k < (n + 1) / 2; ++k) {
        v(k, col) = inv_sqrt2;
        v(n - k, col) = inv_sqrt2;
        ++col;
    }
    if (n % 2 == 0) v(n / 2, col++) = 1.0;
    n_even = col;
    for (std::int64_t k = 1; k < (n + 1) / 2; ++k) {
        v(k, col) = inv_sqrt2;
        v(n - k, col) = -inv_sqrt2;
        ++col;
    }
    return v;
}

}  // namespace

FrftPlan::FrftPlan(std::int64_t n) : n_(n) {
    if (n < 2) throw std::invalid_argument("FrFT plan requires axis length >= 2");

    const Eigen::MatrixXd s = commuting_matrix(n);
    std::int64_t n_even = 0;
    const Eigen::MatrixXd v = parity_basis(n, n_even);
    const Eigen::MatrixXd b = v.transpose() * s * v;
    const std::int64_t n_odd = n - n_even;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solve_even(b.topLeftCorner(n_even, n_even));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solve_odd;
    if (n_odd > 0) solve_odd.compute(b.bottomRightCorner(n_odd, n_odd));
    if (solve_even.info() != Eigen::Success || (n_odd > 0 && solve_odd.info() != Eigen::Success))
        throw std::runtime_error("FrFT eigensolver failed to converge for n=" + std::to_string(n));

    // Descending eigenvalue order within each parity class corresponds to
    // increasing Hermite index.
    const Eigen::MatrixXd even_vecs = v.leftCols(n_even) * solve_even.eigenvectors();
    Eigen::MatrixXd odd_vecs;
    if (n_odd > 0) odd_vecs = v.rightCols(n_odd) * solve_odd.eigenvectors();

    std::vector<int> even_idx, odd_idx;
    if (n % 2 == 0) {
        for (int k = 0; k <= static_cast<int>(n) - 2; k += 2) even_idx.push_back(k);
        even_idx.push_back(static_cast<int>(n));
        for (int k = 1; k <= static_cast<int>(n) - 3; k += 2) odd_idx.push_back(k);
    } else {
        for (int k = 0; k <= static_cast<int>(n) - 1; k += 2) even_idx.push_back(k);
        for (int k = 1; k <= static_cast<int>(n) - 2; k += 2) odd_idx.push_back(k);
    }

    basis_.resize(n, n);
    eig_indices_.resize(n);
    // Columns come out of eigh in ascending eigenvalue order; reverse.
    auto place = [&](const Eigen::MatrixXd& vecs, const std::vector<int>& idx) {
        const std::int64_t m = vecs.cols();
        for (std::int64_t r = 0; r < m; ++r) {
            const int k = idx[static_cast<std::size_t>(r)];
            Eigen::VectorXd col = vecs.col(m - 1 - r);
            for (std::int64_t i = 0; i < n; ++i) {
                if (std::abs(col(i)) > 1e-12) {
                    if (col(i) < 0.0) col = -col;
                    break;
                }
            }
            const std::int64_t slot = (n % 2 == 0 && k == n) ? n - 1 : k;
            basis_.col(slot) = col;
            eig_indices_[static_cast<std::size_t>(slot)] = k;
        }
    };
    place(even_vecs, even_idx);
    if (n_odd > 0) place(odd_vecs, odd_idx);

    const double ortho = (basis_.transpose() * basis_ - Eigen::MatrixXd::Identity(n, n))
                             .cwiseAbs()
                             .maxCoeff();
    if (ortho > 1e-10)
        throw std::runtime_error("FrFT eigenbasis failed orthonormality check for n=" +
                                 std::to_string(n));
}

const Eigen::MatrixXcd& FrftPlan::kernel(FrftOrder p) const {
    const double key = p.canonical();
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto it = kernel_cache_.find(key);
    if (it != kernel_cache_.end()) return *it->second;

    Eigen::VectorXcd phases(n_);
    for (std::int64_t c = 0; c < n_; ++c) {
        const double theta = -std::numbers::pi / 2.0 * key * eig_indices_[static_cast<std::size_t>(c)];
        phases(c) = Cplx(std::cos(theta), std::sin(theta));
    }
    auto k = std::make_unique<Eigen::MatrixXcd>(
        (basis_.cast<Cplx>() * phases.asDiagonal()) * basis_.transpose().cast<Cplx>());
    // The analytic kernel is symmetric; mirror the lower triangle so the
    // stored matrix is symmetric to the bit.
    for (std::int64_t m = 0; m < n_; ++m)
        for (std::int64_t c = 0; c < m; ++c) (*k)(c, m) = (*k)(m, c);
    auto [pos, inserted] = kernel_cache_.emplace(key, std::move(k));
    return *pos->second;
}

namespace {

std::mutex g_plan_mutex;
std::map<std::int64_t, FrftPlanPtr> g_plans;

}  // namespace

FrftPlanPtr build_plan(std::int64_t n) {
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    auto it = g_plans.find(n);
    if (it != g_plans.end()) return it->second;
    auto plan = std::make_shared<const FrftPlan>(n);
    g_plans.emplace(n, plan);
    return plan;
}

AxisPlans make_axis_plans(const Dims3& dims) {
    AxisPlans plans;
    if (dims.d > 1) plans.z = build_plan(dims.d);
    if (dims.h > 1) plans.y = build_plan(dims.h);
    if (dims.w > 1) plans.x = build_plan(dims.w);
    return plans;
}

std::vector<Cplx> frft_1d(const FrftPlan& plan, const std::vector<Cplx>& x, FrftOrder p) {
    if (static_cast<std::int64_t>(x.size()) != plan.size())
        throw std::invalid_argument("frft_1d input length does not match plan size");
    const Eigen::MatrixXcd& k = plan.kernel(p);
    Eigen::Map<const Eigen::VectorXcd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    std::vector<Cplx> out(x.size());
    Eigen::Map<Eigen::VectorXcd>(out.data(), static_cast<Eigen::Index>(out.size())) = k * xv;
    return out;
}

namespace {

void check_axis_plan(const FrftPlanPtr& plan, std::int64_t len, const char* axis) {
    if (len == 1) {
        if (plan) throw std::invalid_argument(std::string("unexpected plan for length-1 ") + axis +
                                              " axis");
        return;
    }
    if (!plan || plan->size() != len)
        throw std::invalid_argument(std::string("plan missing or wrong size for ") + axis + " axis");
}

using RowMatC =
    Eigen::Matrix<Cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

ComplexVolume3D frft_3d(const ComplexVolume3D& v, FrftOrder p, const AxisPlans& plans) {
    const Dims3 dims = v.dims();
    check_axis_plan(plans.z, dims.d, "z");
    check_axis_plan(plans.y, dims.h, "y");
    check_axis_plan(plans.x, dims.w, "x");

    std::vector<Cplx> buf = v.data();
    const auto D = static_cast<Eigen::Index>(dims.d);
    const auto H = static_cast<Eigen::Index>(dims.h);
    const auto W = static_cast<Eigen::Index>(dims.w);

    // x lines: rows of a (D*H, W) row-major view. K is symmetric, so a row
    // transform is right-multiplication by K.
    if (plans.x) {
        const Eigen::MatrixXcd& k = plans.x->kernel(p);
        Eigen::Map<RowMatC> view(buf.data(), D * H, W);
        view = (view * k).eval();
    }
    // y lines: per z-slab, columns of the (H, W) view.
    if (plans.y) {
        const Eigen::MatrixXcd& k = plans.y->kernel(p);
        parallel_for_chunks(0, static_cast<std::size_t>(D), 1, [&](std::size_t z0, std::size_t z1) {
            for (std::size_t z = z0; z < z1; ++z) {
                Eigen::Map<RowMatC> slab(buf.data() + z * static_cast<std::size_t>(H * W), H, W);
                slab = (k * slab).eval();
            }
        });
    }
    // z lines: columns of the (D, H*W) view.
    if (plans.z) {
        const Eigen::MatrixXcd& k = plans.z->kernel(p);
        Eigen::Map<RowMatC> view(buf.data(), D, H * W);
        view = (k * view).eval();
    }
    return ComplexVolume3D(dims, std::move(buf));
}

ComplexVolume3D ifrft_3d(const ComplexVolume3D& X, FrftOrder p, const AxisPlans& plans) {
    return frft_3d(X, -p, plans);
}

ComplexVolume3D to_complex(const Volume3D& v) {
    std::vector<Cplx> data(v.data().size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = Cplx(v.data()[i], 0.0);
    return ComplexVolume3D(v.dims(), std::move(data));
}

LogMagnitude log_magnitude(const ComplexVolume3D& X, const Spacing3& spacing) {
    std::vector<double> mag(X.data().size());
    std::vector<Cplx> phase(X.data().size());
    for (std::size_t i = 0; i < mag.size(); ++i) {
        const double m = std::abs(X.data()[i]);
        mag[i] = std::log1p(m);
        phase[i] = m < 1e-300 ? Cplx(1.0, 0.0) : X.data()[i] / m;
    }
    return LogMagnitude{Volume3D(X.dims(), spacing, std::move(mag)),
                        ComplexVolume3D(X.dims(), std::move(phase))};
}

ComplexVolume3D inv_log_magnitude(const Volume3D& A, const ComplexVolume3D& phase) {
    if (!(A.dims() == phase.dims()))
        throw std::invalid_argument("magnitude/phase dims mismatch");
    std::vector<Cplx> out(A.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double a = A.data()[i];
        if (a < 0.0) throw std::domain_error("negative log-magnitude entry");
        out[i] = std::expm1(a) * phase.data()[i];
    }
    return ComplexVolume3D(A.dims(), std::move(out));
}

}  // namespace fractfield
