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
#ifndef FRACTFIELD_VOLUME_HPP
#define FRACTFIELD_VOLUME_HPP

#include <complex>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace fractfield {

struct Dims3 {
    std::int64_t d = 0, h = 0, w = 0;  // (D, H, W), W fastest in memory

    std::size_t voxels() const {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
               static_cast<std::size_t>(w);
    }
    bool operator==(const Dims3&) const = default;
};

struct Spacing3 {
    double z = 1.0, y = 1.0, x = 1.0;  // millimeters per voxel
    bool operator==(const Spacing3&) const = default;
};

/// Dense real scalar field on a voxel grid. Row-major (z, y, x) with x
/// fastest. Immutable by convention after construction; all mutation goes
/// through building a new volume.
class Volume3D {
public:
    Volume3D() = default;
    Volume3D(Dims3 dims, Spacing3 spacing, std::vector<double> data);

    const Dims3& dims() const { return dims_; }
    const Spacing3& spacing() const { return spacing_; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& mutable_data() { return data_; }

    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return (static_cast<std::size_t>(z) * dims_.h + static_cast<std::size_t>(y)) * dims_.w +
               static_cast<std::size_t>(x);
    }
    double at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return data_[index(z, y, x)];
    }

private:
    Dims3 dims_;
    Spacing3 spacing_;
    std::vector<double> data_;
};

/// Dense complex field, same layout as Volume3D. No spacing: it represents
/// transform-domain data.
class ComplexVolume3D {
public:
    ComplexVolume3D() = default;
    ComplexVolume3D(Dims3 dims, std::vector<std::complex<double>> data);

    const Dims3& dims() const { return dims_; }
    const std::vector<std::complex<double>>& data() const { return data_; }
    std::vector<std::complex<double>>& mutable_data() { return data_; }

private:
    Dims3 dims_;
    std::vector<std::complex<double>> data_;
};

/// Integer segmentation labels on a voxel grid. label_set is the exact set
/// of values present.
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(Dims3 dims, Spacing3 spacing, std::vector<std::uint32_t> labels);

    const Dims3& dims() const { return dims_; }
    const Spacing3& spacing() const { return spacing_; }
    const std::vector<std::uint32_t>& labels() const { return labels_; }
    const std::set<std::uint32_t>& label_set() const { return label_set_; }

    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return (static_cast<std::size_t>(z) * dims_.h + static_cast<std::size_t>(y)) * dims_.w +
               static_cast<std::size_t>(x);
    }

private:
    Dims3 dims_;
    Spacing3 spacing_;
    std::vector<std::uint32_t> labels_;
    std::set<std::uint32_t> label_set_;
};

/// Affine min-max rescale to [0, 1]. Throws on a constant volume
/// ("degenerate intensity range").
Volume3D normalize_unit(const Volume3D& v);

// ---------------------------------------------------------------------------
// File format: a sidecar text header "<name>.vh" (JSON key/value: dims,
// spacing, dtype in {f32,f64,u16}, order "little", components) plus a raw
// little-endian binary payload "<name>.vraw". Multi-component payloads are
// component-planar. Round trips are bit-exact when the file dtype matches
// the in-memory representation (f64 for volumes, u16 for labels).
// ---------------------------------------------------------------------------

Volume3D load_volume(const std::string& path);
void save_volume(const Volume3D& v, const std::string& path, const std::string& dtype = "f64");

LabelMap load_labels(const std::string& path);
void save_labels(const LabelMap& l, const std::string& path);

namespace io {

struct RawHeader {
    Dims3 dims;
    Spacing3 spacing;
    std::string dtype;   // f32 | f64 | u16
    int components = 1;  // 1 scalar, 3 displacement field
};

/// Strips a trailing ".vh"/".vraw" so either file name or the bare stem
/// can be passed on the command line.
std::string base_path(const std::string& path);

RawHeader read_header(const std::string& path);
void write_header(const RawHeader& h, const std::string& path);

/// Payload access in doubles; widening/narrowing per header dtype.
/// Element count must equal dims.voxels() * components.
std::vector<double> read_payload(const RawHeader& h, const std::string& path);
void write_payload(const RawHeader& h, const std::string& path, const std::vector<double>& values);

}  // namespace io

}  // namespace fractfield

#endif
