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
#include "fractfield/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <vector>

#include "fractfield/parallel.hpp"

namespace fractfield {

namespace {

void check_dims(const LabelMap& x, const LabelMap& y) {
    if (!(x.dims() == y.dims())) throw std::invalid_argument("label map dims mismatch");
}

double dice_counts(std::size_t nx, std::size_t ny, std::size_t ninter) {
    if (nx == 0 && ny == 0) return 1.0;
    return 2.0 * static_cast<double>(ninter) / static_cast<double>(nx + ny);
}

struct Point3 {
    double z, y, x;
};

// Boundary voxels of the binary mask pred(v): mask voxels with at least one
// six-connected nonmask neighbor; voxels on the grid edge are boundary.
template <typename Pred>
std::vector<Point3> boundary_points(const LabelMap& m, Pred inside, const Spacing3& sp) {
    const Dims3 d = m.dims();
    std::vector<Point3> pts;
    for (std::int64_t z = 0; z < d.d; ++z) {
        for (std::int64_t y = 0; y < d.h; ++y) {
            for (std::int64_t x = 0; x < d.w; ++x) {
                if (!inside(m.labels()[m.index(z, y, x)])) continue;
                bool edge = z == 0 || z == d.d - 1 || y == 0 || y == d.h - 1 || x == 0 ||
                            x == d.w - 1;
                if (!edge) {
                    edge = !inside(m.labels()[m.index(z - 1, y, x)]) ||
                           !inside(m.labels()[m.index(z + 1, y, x)]) ||
                           !inside(m.labels()[m.index(z, y - 1, x)]) ||
                           !inside(m.labels()[m.index(z, y + 1, x)]) ||
                           !inside(m.labels()[m.index(z, y, x - 1)]) ||
                           !inside(m.labels()[m.index(z, y, x + 1)]);
                }
                if (edge)
                    pts.push_back(Point3{static_cast<double>(z) * sp.z,
                                         static_cast<double>(y) * sp.y,
                                         static_cast<double>(x) * sp.x});
            }
        }
    }
    return pts;
}

void directed_distances(const std::vector<Point3>& from, const std::vector<Point3>& to,
                        std::vector<double>& out) {
    const std::size_t base = out.size();
    out.resize(base + from.size());
    parallel_for_chunks(0, from.size(), 64, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const Point3& q : to) {
                const double dz = from[i].z - q.z;
                const double dy = from[i].y - q.y;
                const double dx = from[i].x - q.x;
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            out[base + i] = std::sqrt(best);
        }
    });
}

double percentile_linear(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

}  // namespace

double dsc(const LabelMap& x, const LabelMap& y, std::uint32_t label) {
    check_dims(x, y);
    std::size_t nx = 0, ny = 0, ninter = 0;
    for (std::size_t i = 0; i < x.labels().size(); ++i) {
        const bool in_x = x.labels()[i] == label;
        const bool in_y = y.labels()[i] == label;
        nx += in_x;
        ny += in_y;
        ninter += in_x && in_y;
    }
    return dice_counts(nx, ny, ninter);
}

std::pair<double, double> overall_and_avg_dsc(const LabelMap& x, const LabelMap& y) {
    check_dims(x, y);
    std::set<std::uint32_t> labels;
    for (std::uint32_t l : x.label_set())
        if (l != 0) labels.insert(l);
    for (std::uint32_t l : y.label_set())
        if (l != 0) labels.insert(l);
    if (labels.empty())
        throw std::domain_error("no nonbackground labels: average DSC undefined");

    double sum = 0.0;
    for (std::uint32_t l : labels) sum += dsc(x, y, l);
    const double avg = sum / static_cast<double>(labels.size());

    std::size_t nx = 0, ny = 0, ninter = 0;
    for (std::size_t i = 0; i < x.labels().size(); ++i) {
        const bool in_x = x.labels()[i] != 0;
        const bool in_y = y.labels()[i] != 0;
        nx += in_x;
        ny += in_y;
        ninter += in_x && in_y;
    }
    return {dice_counts(nx, ny, ninter), avg};
}

double hd95(const LabelMap& x, const LabelMap& y, std::uint32_t label, const Spacing3& spacing) {
    check_dims(x, y);
    auto inside = [label](std::uint32_t v) { return v == label; };
    const std::vector<Point3> bx = boundary_points(x, inside, spacing);
    const std::vector<Point3> by = boundary_points(y, inside, spacing);
    if (bx.empty() || by.empty()) throw std::domain_error("undefined distance: empty mask");
    std::vector<double> dists;
    dists.reserve(bx.size() + by.size());
    directed_distances(bx, by, dists);
    directed_distances(by, bx, dists);
    return percentile_linear(std::move(dists), 0.95);
}

double folding_fraction(const DisplacementField& field) {
    const Volume3D det = jacobian_determinant(field);
    std::size_t folded = 0;
    for (double v : det.data()) folded += v <= 0.0;
    return 100.0 * static_cast<double>(folded) / static_cast<double>(det.data().size());
}

double jacobian_std(const DisplacementField& field, bool include_boundary) {
    const Volume3D det = jacobian_determinant(field);
    const Dims3 d = field.dims();
    std::vector<double> vals;
    vals.reserve(det.data().size());
    for (std::int64_t z = 0; z < d.d; ++z) {
        for (std::int64_t y = 0; y < d.h; ++y) {
            for (std::int64_t x = 0; x < d.w; ++x) {
                if (!include_boundary && (z == 0 || z == d.d - 1 || y == 0 || y == d.h - 1 ||
                                          x == 0 || x == d.w - 1))
                    continue;
                vals.push_back(det.at(z, y, x));
            }
        }
    }
    if (vals.empty()) throw std::domain_error("jacobian_std: empty interior");
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    return std::sqrt(var);
}

MetricReport evaluate_registration(const LabelMap& fixed_labels, const LabelMap& warped_labels,
                                   const DisplacementField& field) {
    check_dims(fixed_labels, warped_labels);
    if (!(fixed_labels.dims() == field.dims()))
        throw std::invalid_argument("labels/field dims mismatch");

    MetricReport report;
    std::set<std::uint32_t> labels;
    for (std::uint32_t l : fixed_labels.label_set())
        if (l != 0) labels.insert(l);
    for (std::uint32_t l : warped_labels.label_set())
        if (l != 0) labels.insert(l);

    for (std::uint32_t l : labels) {
        report.per_label_dsc[l] = dsc(fixed_labels, warped_labels, l);
        try {
            report.hd95_mm[l] = hd95(fixed_labels, warped_labels, l, fixed_labels.spacing());
        } catch (const std::domain_error&) {
            report.hd95_mm[l] = std::numeric_limits<double>::quiet_NaN();
        }
    }
    const auto [overall, avg] = overall_and_avg_dsc(fixed_labels, warped_labels);
    report.overall_dsc = overall;
    report.avg_dsc = avg;
    report.folding_pct = folding_fraction(field);
    report.jacobian_std = jacobian_std(field);
    return report;
}

}  // namespace fractfield
