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
#include "fractfield/volume.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts are unsupported");

namespace fractfield {

namespace {

void check_dims(const Dims3& dims) {
    if (dims.d < 1 || dims.h < 1 || dims.w < 1)
        throw std::invalid_argument("volume dims must all be >= 1");
}

void check_spacing(const Spacing3& s) {
    if (!(s.z > 0.0) || !(s.y > 0.0) || !(s.x > 0.0))
        throw std::invalid_argument("voxel spacing must be positive");
}

void check_finite(const std::vector<double>& data, const char* what) {
    for (double v : data)
        if (!std::isfinite(v))
            throw std::invalid_argument(std::string(what) + " contains a non-finite value");
}

}  // namespace

Volume3D::Volume3D(Dims3 dims, Spacing3 spacing, std::vector<double> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    check_dims(dims_);
    check_spacing(spacing_);
    if (data_.size() != dims_.voxels())
        throw std::invalid_argument("volume data length does not match dims");
    check_finite(data_, "volume");
}

ComplexVolume3D::ComplexVolume3D(Dims3 dims, std::vector<std::complex<double>> data)
    : dims_(dims), data_(std::move(data)) {
    check_dims(dims_);
    if (data_.size() != dims_.voxels())
        throw std::invalid_argument("complex volume data length does not match dims");
    for (const auto& v : data_)
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
            throw std::invalid_argument("complex volume contains a non-finite value");
}

LabelMap::LabelMap(Dims3 dims, Spacing3 spacing, std::vector<std::uint32_t> labels)
    : dims_(dims), spacing_(spacing), labels_(std::move(labels)) {
    check_dims(dims_);
    check_spacing(spacing_);
    if (labels_.size() != dims_.voxels())
        throw std::invalid_argument("label data length does not match dims");
    label_set_.insert(labels_.begin(), labels_.end());
}

Volume3D normalize_unit(const Volume3D& v) {
    const auto [mn_it, mx_it] = std::minmax_element(v.data().begin(), v.data().end());
    const double mn = *mn_it, mx = *mx_it;
    if (mx == mn) throw std::domain_error("degenerate intensity range");
    std::vector<double> out(v.data().size());
    const double inv = 1.0 / (mx - mn);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (v.data()[i] - mn) * inv;
    return Volume3D(v.dims(), v.spacing(), std::move(out));
}

namespace io {

std::string base_path(const std::string& path) {
    if (path.size() > 3 && path.compare(path.size() - 3, 3, ".vh") == 0)
        return path.substr(0, path.size() - 3);
    if (path.size() > 5 && path.compare(path.size() - 5, 5, ".vraw") == 0)
        return path.substr(0, path.size() - 5);
    return path;
}

RawHeader read_header(const std::string& path) {
    const std::string hpath = base_path(path) + ".vh";
    std::ifstream in(hpath);
    if (!in) throw std::runtime_error("cannot open header file: " + hpath);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed header " + hpath + ": " + e.what());
    }
    RawHeader h;
    try {
        auto dims = j.at("dims");
        h.dims = Dims3{dims.at(0).get<std::int64_t>(), dims.at(1).get<std::int64_t>(),
                       dims.at(2).get<std::int64_t>()};
        auto sp = j.at("spacing");
        h.spacing = Spacing3{sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        h.dtype = j.at("dtype").get<std::string>();
        h.components = j.value("components", 1);
        if (j.value("order", "little") != "little")
            throw std::runtime_error("unsupported byte order in " + hpath);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("incomplete header " + hpath + ": " + e.what());
    }
    if (h.dtype != "f32" && h.dtype != "f64" && h.dtype != "u16")
        throw std::runtime_error("unknown dtype tag '" + h.dtype + "' in " + hpath);
    check_dims(h.dims);
    check_spacing(h.spacing);
    if (h.components != 1 && h.components != 3)
        throw std::runtime_error("unsupported component count in " + hpath);
    return h;
}

void write_header(const RawHeader& h, const std::string& path) {
    const std::string hpath = base_path(path) + ".vh";
    nlohmann::json j;
    j["dims"] = {h.dims.d, h.dims.h, h.dims.w};
    j["spacing"] = {h.spacing.z, h.spacing.y, h.spacing.x};
    j["dtype"] = h.dtype;
    j["order"] = "little";
    j["components"] = h.components;
    std::ofstream out(hpath);
    if (!out) throw std::runtime_error("cannot write header file: " + hpath);
    out << j.dump(2) << "\n";
}

namespace {

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    return 2;  // u16
}

}  // namespace

std::vector<double> read_payload(const RawHeader& h, const std::string& path) {
    const std::string ppath = base_path(path) + ".vraw";
    std::ifstream in(ppath, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open payload file: " + ppath);
    const std::size_t nbytes = static_cast<std::size_t>(in.tellg());
    const std::size_t count = h.dims.voxels() * static_cast<std::size_t>(h.components);
    if (nbytes != count * dtype_size(h.dtype))
        throw std::runtime_error("payload byte count mismatch in " + ppath + ": header declares " +
                                 std::to_string(count * dtype_size(h.dtype)) + " bytes, file has " +
                                 std::to_string(nbytes));
    in.seekg(0);
    std::vector<double> values(count);
    if (h.dtype == "f64") {
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
    } else if (h.dtype == "f32") {
        std::vector<float> buf(count);
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<double>(buf[i]);
    } else {
        std::vector<std::uint16_t> buf(count);
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(count * sizeof(std::uint16_t)));
        for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<double>(buf[i]);
    }
    if (!in) throw std::runtime_error("short read on payload file: " + ppath);
    return values;
}

void write_payload(const RawHeader& h, const std::string& path, const std::vector<double>& values) {
    const std::string ppath = base_path(path) + ".vraw";
    const std::size_t count = h.dims.voxels() * static_cast<std::size_t>(h.components);
    if (values.size() != count)
        throw std::invalid_argument("payload element count does not match header");
    std::ofstream out(ppath, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write payload file: " + ppath);
    if (h.dtype == "f64") {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(count * sizeof(double)));
    } else if (h.dtype == "f32") {
        std::vector<float> buf(count);
        for (std::size_t i = 0; i < count; ++i) buf[i] = static_cast<float>(values[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(count * sizeof(float)));
    } else {
        std::vector<std::uint16_t> buf(count);
        for (std::size_t i = 0; i < count; ++i) {
            const double v = values[i];
            if (v < 0.0 || v > 65535.0 || v != std::floor(v))
                throw std::invalid_argument("value not representable as u16: " + std::to_string(v));
            buf[i] = static_cast<std::uint16_t>(v);
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(count * sizeof(std::uint16_t)));
    }
    if (!out) throw std::runtime_error("short write on payload file: " + ppath);
}

}  // namespace io

Volume3D load_volume(const std::string& path) {
    const io::RawHeader h = io::read_header(path);
    if (h.components != 1)
        throw std::runtime_error("expected a scalar volume, got components=" +
                                 std::to_string(h.components) + ": " + path);
    std::vector<double> values = io::read_payload(h, path);
    for (double v : values)
        if (!std::isfinite(v)) throw std::runtime_error("non-finite payload value in " + path);
    return Volume3D(h.dims, h.spacing, std::move(values));
}

void save_volume(const Volume3D& v, const std::string& path, const std::string& dtype) {
    if (dtype != "f32" && dtype != "f64")
        throw std::invalid_argument("volume dtype must be f32 or f64");
    io::RawHeader h{v.dims(), v.spacing(), dtype, 1};
    io::write_header(h, path);
    io::write_payload(h, path, v.data());
}

LabelMap load_labels(const std::string& path) {
    const io::RawHeader h = io::read_header(path);
    if (h.components != 1)
        throw std::runtime_error("expected a label map, got components=" +
                                 std::to_string(h.components) + ": " + path);
    std::vector<double> values = io::read_payload(h, path);
    std::vector<std::uint32_t> labels(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (!std::isfinite(v) || v < 0.0 || v != std::floor(v))
            throw std::runtime_error("label payload must hold non-negative integers: " + path);
        labels[i] = static_cast<std::uint32_t>(v);
    }
    return LabelMap(h.dims, h.spacing, std::move(labels));
}

void save_labels(const LabelMap& l, const std::string& path) {
    io::RawHeader h{l.dims(), l.spacing(), "u16", 1};
    io::write_header(h, path);
    std::vector<double> values(l.labels().size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(l.labels()[i]);
    io::write_payload(h, path, values);
}

}  // namespace fractfield
