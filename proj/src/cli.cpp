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
#include "fractfield/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fractfield/dfrft.hpp"
#include "fractfield/fca.hpp"
#include "fractfield/losses.hpp"
#include "fractfield/metrics.hpp"
#include "fractfield/parallel.hpp"
#include "fractfield/regopt.hpp"
#include "fractfield/warp.hpp"

namespace fractfield {

namespace {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Dims3 parse_dims(const std::string& s) {
    Dims3 d;
    char sep1 = 0, sep2 = 0;
    std::istringstream in(s);
    if (!(in >> d.d >> sep1 >> d.h >> sep2 >> d.w) || sep1 != 'x' || sep2 != 'x' || d.d < 1 ||
        d.h < 1 || d.w < 1)
        throw CLI::ValidationError("--dims", "expected DxHxW with positive integers");
    return d;
}

std::vector<double> parse_triple_or_scalar(const std::string& s) {
    std::vector<double> vals;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) vals.push_back(std::stod(tok));
    if (vals.empty()) throw CLI::ValidationError("--magnitude", "expected comma-separated reals");
    return vals;
}

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void finish_manifest(RunManifest m, const Timer& timer, const std::string& path) {
    m.wall_time_seconds = timer.seconds();
    write_manifest(m, path);
}

// --- subcommand handlers -------------------------------------------------

void run_frft(const std::string& in, double order, const std::string& out_mag,
              const std::string& out_phase, bool log_scale) {
    const Timer timer;
    const Volume3D v = load_volume(in);
    const AxisPlans plans = make_axis_plans(v.dims());
    const ComplexVolume3D x = frft_3d(to_complex(v), FrftOrder{order}, plans);

    std::vector<double> mag(x.data().size()), phase(x.data().size());
    for (std::size_t i = 0; i < mag.size(); ++i) {
        const double m = std::abs(x.data()[i]);
        mag[i] = log_scale ? std::log1p(m) : m;
        phase[i] = std::atan2(x.data()[i].imag(), x.data()[i].real());
    }
    save_volume(Volume3D(v.dims(), v.spacing(), std::move(mag)), out_mag);
    save_volume(Volume3D(v.dims(), v.spacing(), std::move(phase)), out_phase);

    RunManifest m;
    m.subcommand = "frft";
    m.argv = {"frft", "--in", in, "--order", fmt(order), "--out-mag", out_mag, "--out-phase",
              out_phase};
    if (log_scale) m.argv.push_back("--log");
    m.config = {{"order", fmt(order)}, {"log", log_scale ? "1" : "0"}};
    finish_manifest(std::move(m), timer, io::base_path(out_mag) + ".manifest");
}

void run_fca_audit(std::int64_t channels, double alpha, const std::string& grid_spec,
                   const std::string& out) {
    const Timer timer;
    const Dims3 grid = grid_spec.empty() ? Dims3{1, 1, 1} : parse_dims(grid_spec);
    const BranchCosts params = count_branch_params(channels, alpha);
    const BranchCosts flops = count_flops(channels, alpha, grid);
    const std::int64_t ac = branch_channels(channels, alpha);

    std::ostringstream csv;
    csv << "branch,kernel_size,channels_in,channels_out,params,flops\n";
    csv << "frft0,3," << ac << "," << ac << "," << params.frft0 << "," << flops.frft0 << "\n";
    csv << "frft45,1," << 2 * ac << "," << 2 * ac << "," << params.frft45 << "," << flops.frft45
        << "\n";
    csv << "frft90,1," << 2 * ac << "," << 2 * ac << "," << params.frft90 << "," << flops.frft90
        << "\n";
    csv << "logmag,1," << ac << "," << ac << "," << params.logmag << "," << flops.logmag << "\n";
    csv << "total,,,," << params.total << "," << flops.total << "\n";

    const int heads = channels % 4 == 0 ? 4 : (channels % 2 == 0 ? 2 : 1);
    const WeightSet ws = make_fca_block_weights(channels, alpha, heads, 0);
    audit_shapes(ws, expected_fca_block_shapes(channels, alpha, heads));
    csv << "tensor,shape,count\n";
    for (const auto& [name, t] : ws.tensors()) {
        csv << name << ",";
        for (std::size_t i = 0; i < t.shape.size(); ++i)
            csv << (i ? "x" : "") << t.shape[i];
        csv << "," << t.count() << "\n";
    }

    if (out.empty()) {
        std::cout << csv.str();
        return;
    }
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << csv.str();
    RunManifest m;
    m.subcommand = "fca-audit";
    m.argv = {"fca-audit", "--channels", std::to_string(channels), "--alpha", fmt(alpha)};
    if (!grid_spec.empty()) {
        m.argv.push_back("--grid");
        m.argv.push_back(grid_spec);
    }
    m.argv.insert(m.argv.end(), {"--out", out});
    finish_manifest(std::move(m), timer, out + ".manifest");
}

void write_trace_csv(const std::vector<TraceEntry>& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "iteration,level,total,similarity,smoothness\n";
    for (const TraceEntry& e : trace)
        f << e.iteration << "," << e.level << "," << fmt(e.terms.total) << ","
          << fmt(e.terms.similarity) << "," << fmt(e.terms.smoothness) << "\n";
}

void write_metrics_csv(const MetricReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "# overall_dsc: DSC of the union of nonbackground labels; avg_dsc: unweighted mean over "
         "labels\n";
    f << "metric,label,value\n";
    for (const auto& [label, v] : r.per_label_dsc) f << "per_label_dsc," << label << "," << fmt(v) << "\n";
    for (const auto& [label, v] : r.hd95_mm) f << "hd95_mm," << label << "," << fmt(v) << "\n";
    f << "overall_dsc,," << fmt(r.overall_dsc) << "\n";
    f << "avg_dsc,," << fmt(r.avg_dsc) << "\n";
    f << "folding_pct,," << fmt(r.folding_pct) << "\n";
    f << "jacobian_std,," << fmt(r.jacobian_std) << "\n";
}

struct RegisterArgs {
    std::string fixed, moving, out_field, out_warped;
    std::string trace, fixed_labels, moving_labels, out_warped_labels, out_metrics;
    double lambda = 1.0;
    int cc_window = 9;
    int iters = 200;
    int levels = 2;
    double step = 0.25;
    std::uint64_t seed = 0;
};

void run_register(const RegisterArgs& a) {
    const Timer timer;
    const Volume3D fixed = load_volume(a.fixed);
    const Volume3D moving = load_volume(a.moving);

    RegistrationConfig cfg;
    cfg.iterations = a.iters;
    cfg.pyramid_levels = a.levels;
    cfg.step_size = a.step;
    cfg.seed = a.seed;
    cfg.loss.lambda = a.lambda;
    cfg.loss.window = a.cc_window;

    RegistrationResult result;
    if (!a.fixed_labels.empty() && !a.moving_labels.empty()) {
        result = register_pair(fixed, moving, cfg, load_labels(a.fixed_labels),
                               load_labels(a.moving_labels));
    } else {
        result = register_pair(fixed, moving, cfg);
    }

    save_field(result.field, a.out_field);
    save_volume(warp_image(moving, result.field), a.out_warped);
    if (!a.trace.empty()) write_trace_csv(result.loss_trace, a.trace);
    if (!a.out_warped_labels.empty()) {
        if (a.moving_labels.empty())
            throw std::runtime_error("--out-warped-labels requires --moving-labels");
        save_labels(warp_labels(load_labels(a.moving_labels), result.field), a.out_warped_labels);
    }
    if (!a.out_metrics.empty()) {
        if (!result.metrics)
            throw std::runtime_error("--out-metrics requires --fixed-labels and --moving-labels");
        write_metrics_csv(*result.metrics, a.out_metrics);
    }

    RunManifest m;
    m.subcommand = "register";
    m.seed = a.seed;
    m.argv = {"register", "--fixed", a.fixed, "--moving", a.moving,
              "--lambda", fmt(a.lambda), "--cc-window", std::to_string(a.cc_window),
              "--iters", std::to_string(a.iters), "--levels", std::to_string(a.levels),
              "--step", fmt(a.step), "--seed", std::to_string(a.seed),
              "--out-field", a.out_field, "--out-warped", a.out_warped};
    auto opt = [&m](const char* flag, const std::string& v) {
        if (!v.empty()) m.argv.insert(m.argv.end(), {flag, v});
    };
    opt("--trace", a.trace);
    opt("--fixed-labels", a.fixed_labels);
    opt("--moving-labels", a.moving_labels);
    opt("--out-warped-labels", a.out_warped_labels);
    opt("--out-metrics", a.out_metrics);
    m.config = {{"lambda", fmt(a.lambda)},
                {"cc_window", std::to_string(a.cc_window)},
                {"iterations", std::to_string(a.iters)},
                {"pyramid_levels", std::to_string(a.levels)},
                {"step_size", fmt(a.step)}};
    finish_manifest(std::move(m), timer, io::base_path(a.out_field) + ".manifest");
}

void run_synth(const std::string& kind, const std::string& dims_spec, const std::string& mag_spec,
               std::uint64_t seed, const std::string& prefix) {
    const Timer timer;
    const Dims3 dims = parse_dims(dims_spec);
    const std::vector<double> magnitude = parse_triple_or_scalar(mag_spec);
    const SynthPair pair = synth_pair(parse_synth_kind(kind), dims, magnitude, seed);

    save_volume(pair.fixed, prefix + "_fixed");
    save_volume(pair.moving, prefix + "_moving");
    save_field(pair.truth, prefix + "_truth");
    save_labels(pair.labels_f, prefix + "_labels_fixed");
    save_labels(pair.labels_m, prefix + "_labels_moving");

    RunManifest m;
    m.subcommand = "synth";
    m.seed = seed;
    m.argv = {"synth", "--kind", kind, "--dims", dims_spec, "--magnitude", mag_spec,
              "--seed", std::to_string(seed), "--out-prefix", prefix};
    finish_manifest(std::move(m), timer, prefix + ".manifest");
}

void run_eval(const std::string& fixed_labels, const std::string& warped_labels,
              const std::string& field_path, const std::string& out) {
    const Timer timer;
    const MetricReport report = evaluate_registration(load_labels(fixed_labels),
                                                      load_labels(warped_labels),
                                                      load_field(field_path));
    write_metrics_csv(report, out);
    RunManifest m;
    m.subcommand = "eval";
    m.argv = {"eval", "--fixed-labels", fixed_labels, "--warped-labels", warped_labels,
              "--field", field_path, "--out", out};
    finish_manifest(std::move(m), timer, out + ".manifest");
}

void run_slice_dump(const std::string& in, const std::string& axis, std::int64_t index,
                    const std::string& out) {
    const Timer timer;
    if (axis.size() != 1 || (axis[0] != 'z' && axis[0] != 'y' && axis[0] != 'x'))
        throw std::runtime_error("axis must be one of z, y, x");
    write_slice_pgm(load_volume(in), axis[0], index, out);
    RunManifest m;
    m.subcommand = "slice-dump";
    m.argv = {"slice-dump", "--in", in, "--axis", axis, "--index", std::to_string(index),
              "--out", out};
    finish_manifest(std::move(m), timer, out + ".manifest");
}

}  // namespace

void write_slice_pgm(const Volume3D& v, char axis, std::int64_t index, const std::string& path) {
    const Dims3 d = v.dims();
    std::int64_t rows, cols, limit;
    switch (axis) {
        case 'z': rows = d.h; cols = d.w; limit = d.d; break;
        case 'y': rows = d.d; cols = d.w; limit = d.h; break;
        case 'x': rows = d.d; cols = d.h; limit = d.w; break;
        default: throw std::invalid_argument("axis must be z, y or x");
    }
    if (index < 0 || index >= limit)
        throw std::out_of_range("slice index " + std::to_string(index) + " out of range");

    std::vector<double> slice(static_cast<std::size_t>(rows * cols));
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) {
            double val;
            switch (axis) {
                case 'z': val = v.at(index, r, c); break;
                case 'y': val = v.at(r, index, c); break;
                default: val = v.at(r, c, index); break;
            }
            slice[static_cast<std::size_t>(r * cols + c)] = val;
        }
    }
    const auto [mn, mx] = std::minmax_element(slice.begin(), slice.end());
    std::vector<unsigned char> bytes(slice.size(), 0);
    if (*mx > *mn) {
        const double scale = 255.0 / (*mx - *mn);
        for (std::size_t i = 0; i < slice.size(); ++i)
            bytes[i] = static_cast<unsigned char>(std::lround((slice[i] - *mn) * scale));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P5\n" << cols << " " << rows << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void write_manifest(const RunManifest& m, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw std::runtime_error("cannot write " + tmp);
        f << "subcommand = " << m.subcommand << "\n";
        f << "version = " << m.version << "\n";
        f << "seed = " << m.seed << "\n";
        f << "wall_time_seconds = " << fmt(m.wall_time_seconds) << "\n";
        for (const auto& [k, v] : m.config) f << "config." << k << " = " << v << "\n";
        f << "argc = " << m.argv.size() << "\n";
        for (std::size_t i = 0; i < m.argv.size(); ++i)
            f << "arg." << i << " = " << m.argv[i] << "\n";
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename manifest into place: " + path);
}

RunManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest: " + path);
    RunManifest m;
    std::map<std::size_t, std::string> args;
    std::string line;
    while (std::getline(f, line)) {
        const auto sep = line.find(" = ");
        if (sep == std::string::npos) continue;
        const std::string key = line.substr(0, sep);
        const std::string value = line.substr(sep + 3);
        if (key == "subcommand") m.subcommand = value;
        else if (key == "version") m.version = value;
        else if (key == "seed") m.seed = std::stoull(value);
        else if (key == "wall_time_seconds") m.wall_time_seconds = std::stod(value);
        else if (key.rfind("config.", 0) == 0) m.config[key.substr(7)] = value;
        else if (key.rfind("arg.", 0) == 0) args[std::stoul(key.substr(4))] = value;
    }
    for (const auto& [i, v] : args) m.argv.push_back(v);
    if (m.subcommand.empty()) throw std::runtime_error("manifest missing subcommand: " + path);
    return m;
}

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"fractfield: fractional Fourier registration toolkit"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "cap worker threads (env FRACTFIELD_THREADS)");

    // frft
    auto* frft = app.add_subcommand("frft", "separable 3D fractional Fourier transform");
    std::string f_in, f_mag, f_phase;
    double f_order = 1.0;
    bool f_log = false;
    frft->add_option("--in", f_in, "input volume")->required();
    frft->add_option("--order", f_order, "fractional order p")->required();
    frft->add_option("--out-mag", f_mag, "magnitude output volume")->required();
    frft->add_option("--out-phase", f_phase, "phase-angle output volume")->required();
    frft->add_flag("--log", f_log, "write log(1+|X|) instead of |X|");

    // fca-audit
    auto* audit = app.add_subcommand("fca-audit", "branch parameter/FLOP table and shape audit");
    std::int64_t a_channels = 48;
    double a_alpha = 1.0;
    std::string a_grid, a_out;
    audit->add_option("--channels", a_channels, "channel count C")->required();
    audit->add_option("--alpha", a_alpha, "channel coefficient")->required();
    audit->add_option("--grid", a_grid, "token grid DxHxW for FLOPs (default 1x1x1)");
    audit->add_option("--out", a_out, "write CSV here instead of stdout");

    // register
    auto* reg = app.add_subcommand("register", "variational displacement-field registration");
    RegisterArgs r;
    reg->add_option("--fixed", r.fixed)->required();
    reg->add_option("--moving", r.moving)->required();
    reg->add_option("--lambda", r.lambda, "smoothness weight");
    reg->add_option("--cc-window", r.cc_window, "local CC window side");
    reg->add_option("--iters", r.iters, "total iterations");
    reg->add_option("--levels", r.levels, "pyramid levels");
    reg->add_option("--step", r.step, "step size in voxels");
    reg->add_option("--seed", r.seed);
    reg->add_option("--out-field", r.out_field)->required();
    reg->add_option("--out-warped", r.out_warped)->required();
    reg->add_option("--trace", r.trace, "per-iteration loss CSV");
    reg->add_option("--fixed-labels", r.fixed_labels);
    reg->add_option("--moving-labels", r.moving_labels);
    reg->add_option("--out-warped-labels", r.out_warped_labels);
    reg->add_option("--out-metrics", r.out_metrics);

    // synth
    auto* synth = app.add_subcommand("synth", "analytic phantom pair with exact ground truth");
    std::string s_kind, s_dims, s_mag, s_prefix;
    std::uint64_t s_seed = 0;
    synth->add_option("--kind", s_kind, "translate | scale | swirl")->required();
    synth->add_option("--dims", s_dims, "DxHxW")->required();
    synth->add_option("--magnitude", s_mag, "z,y,x triple or single value")->required();
    synth->add_option("--seed", s_seed);
    synth->add_option("--out-prefix", s_prefix)->required();

    // eval
    auto* eval = app.add_subcommand("eval", "registration metric report");
    std::string e_fixed, e_warped, e_field, e_out;
    eval->add_option("--fixed-labels", e_fixed)->required();
    eval->add_option("--warped-labels", e_warped)->required();
    eval->add_option("--field", e_field)->required();
    eval->add_option("--out", e_out)->required();

    // slice-dump
    auto* slice = app.add_subcommand("slice-dump", "grayscale PGM of one slice");
    std::string d_in, d_axis = "z", d_out;
    std::int64_t d_index = 0;
    slice->add_option("--in", d_in)->required();
    slice->add_option("--axis", d_axis, "z | y | x");
    slice->add_option("--index", d_index)->required();
    slice->add_option("--out", d_out)->required();

    // rerun
    auto* rerun = app.add_subcommand("rerun", "re-execute a run from its manifest");
    std::string m_path;
    rerun->add_option("--manifest", m_path)->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }
    if (threads > 0) set_max_threads(threads);

    try {
        if (frft->parsed()) run_frft(f_in, f_order, f_mag, f_phase, f_log);
        else if (audit->parsed()) run_fca_audit(a_channels, a_alpha, a_grid, a_out);
        else if (reg->parsed()) run_register(r);
        else if (synth->parsed()) run_synth(s_kind, s_dims, s_mag, s_seed, s_prefix);
        else if (eval->parsed()) run_eval(e_fixed, e_warped, e_field, e_out);
        else if (slice->parsed()) run_slice_dump(d_in, d_axis, d_index, d_out);
        else if (rerun->parsed()) {
            const RunManifest m = read_manifest(m_path);
            if (m.subcommand == "rerun") throw std::runtime_error("refusing recursive rerun");
            return dispatch(m.argv);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace fractfield
