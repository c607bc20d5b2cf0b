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
#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstring>
#include <random>

#include "fractfield/fca.hpp"
#include "fractfield/parallel.hpp"

using namespace fractfield;
using Cplx = std::complex<double>;

namespace {

TokenGrid random_grid(int level, Dims3 d, std::int64_t c, std::uint64_t seed, double amp = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-amp, amp);
    TokenGrid t(level, d, c);
    for (double& v : t.data) v = dist(rng);
    return t;
}

// ---- straight-line oracle helpers (plain loops, no library forward code) ---

std::vector<double> norm_channels_naive(const std::vector<double>& x, std::size_t tokens,
                                        std::int64_t c, const std::vector<double>& scale,
                                        const std::vector<double>& offset) {
    std::vector<double> out(x.size());
    for (std::size_t t = 0; t < tokens; ++t) {
        double mean = 0;
        for (std::int64_t i = 0; i < c; ++i) mean += x[t * c + i];
        mean /= static_cast<double>(c);
        double var = 0;
        for (std::int64_t i = 0; i < c; ++i)
            var += (x[t * c + i] - mean) * (x[t * c + i] - mean);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::int64_t i = 0; i < c; ++i)
            out[t * c + i] = (x[t * c + i] - mean) * inv * scale[i] + offset[i];
    }
    return out;
}

// One channel of the grid as a complex lattice, FrFT applied axis by axis
// (x then y then z) with explicit kernel mat-vecs; negate p for the inverse.
std::vector<Cplx> frft_channel_naive(std::vector<Cplx> v, Dims3 d, double p,
                                     const AxisPlans& plans) {
    auto apply = [&](const FrftPlanPtr& plan, std::int64_t len, std::int64_t stride,
                     std::int64_t nblocks, auto base_of) {
        if (!plan) return;
        const Eigen::MatrixXcd& k = plan->kernel(FrftOrder{p});
        for (std::int64_t b = 0; b < nblocks; ++b) {
            const std::int64_t base = base_of(b);
            std::vector<Cplx> line(static_cast<std::size_t>(len));
            for (std::int64_t i = 0; i < len; ++i)
                line[i] = v[static_cast<std::size_t>(base + i * stride)];
            for (std::int64_t m = 0; m < len; ++m) {
                Cplx acc(0, 0);
                for (std::int64_t i = 0; i < len; ++i) acc += k(m, i) * line[i];
                v[static_cast<std::size_t>(base + m * stride)] = acc;
            }
        }
    };
    apply(plans.x, d.w, 1, d.d * d.h, [&](std::int64_t b) { return b * d.w; });
    apply(plans.y, d.h, d.w, d.d * d.w, [&](std::int64_t b) {
        return (b / d.w) * d.h * d.w + (b % d.w);
    });
    apply(plans.z, d.d, d.h * d.w, d.h * d.w, [&](std::int64_t b) { return b; });
    return v;
}

std::vector<double> extractor_oracle(const TokenGrid& t, const WeightSet& w,
                                     const std::string& prefix, const AxisPlans& plans,
                                     double alpha) {
    const std::int64_t c = t.channels;
    const std::int64_t ac = branch_channels(c, alpha);
    const std::size_t n = t.tokens();
    const Dims3 d = t.dims;
    const std::vector<double> xn = norm_channels_naive(
        t.data, n, c, w.get(prefix + "norm.scale").data, w.get(prefix + "norm.offset").data);
    const bool full = alpha == 1.0;

    auto channel = [&](const std::vector<double>& src, std::int64_t ch) {
        std::vector<Cplx> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = Cplx(src[i * c + ch], 0.0);
        return out;
    };

    std::vector<double> concat(n * static_cast<std::size_t>(4 * ac + c), 0.0);
    const std::int64_t cc = 4 * ac + c;

    // 0 deg branch: 3x3x3 zero-padded conv + ReLU on channels [s0, s0+ac)
    {
        const std::int64_t s0 = 0;
        const Tensor& kker = w.get(prefix + "branch0.kernel");
        const Tensor& kb = w.get(prefix + "branch0.bias");
        for (std::int64_t z = 0; z < d.d; ++z)
            for (std::int64_t y = 0; y < d.h; ++y)
                for (std::int64_t x = 0; x < d.w; ++x)
                    for (std::int64_t o = 0; o < ac; ++o) {
                        double acc = kb.data[o];
                        for (std::int64_t i = 0; i < ac; ++i)
                            for (std::int64_t kz = -1; kz <= 1; ++kz)
                                for (std::int64_t ky = -1; ky <= 1; ++ky)
                                    for (std::int64_t kx = -1; kx <= 1; ++kx) {
                                        const std::int64_t sz = z + kz, sy = y + ky, sx = x + kx;
                                        if (sz < 0 || sz >= d.d || sy < 0 || sy >= d.h ||
                                            sx < 0 || sx >= d.w)
                                            continue;
                                        acc += kker.data[(((o * ac + i) * 3 + kz + 1) * 3 + ky + 1) *
                                                             3 + kx + 1] *
                                               xn[((sz * d.h + sy) * d.w + sx) * c + s0 + i];
                                    }
                        concat[((z * d.h + y) * d.w + x) * cc + o] = acc > 0 ? acc : 0;
                    }
    }

    auto complex_branch = [&](std::int64_t sbase, double p, const char* name, std::int64_t dest,
                              std::vector<std::vector<Cplx>>* keep) {
        std::vector<std::vector<Cplx>> xf;
        for (std::int64_t ch = 0; ch < ac; ++ch)
            xf.push_back(frft_channel_naive(channel(xn, sbase + ch), d, p, plans));
        if (keep) *keep = xf;
        const Tensor& kker = w.get(prefix + std::string(name) + ".kernel");
        const Tensor& kb = w.get(prefix + std::string(name) + ".bias");
        for (std::size_t tok = 0; tok < n; ++tok) {
            std::vector<double> in2(2 * ac), out2(2 * ac);
            for (std::int64_t ch = 0; ch < ac; ++ch) {
                in2[ch] = xf[ch][tok].real();
                in2[ac + ch] = xf[ch][tok].imag();
            }
            for (std::int64_t o = 0; o < 2 * ac; ++o) {
                double acc = kb.data[o];
                for (std::int64_t i = 0; i < 2 * ac; ++i) acc += kker.data[o * 2 * ac + i] * in2[i];
                out2[o] = acc > 0 ? acc : 0;
            }
            for (std::int64_t ch = 0; ch < ac; ++ch) xf[ch][tok] = Cplx(out2[ch], out2[ac + ch]);
        }
        for (std::int64_t ch = 0; ch < ac; ++ch) {
            const std::vector<Cplx> back = frft_channel_naive(xf[ch], d, -p, plans);
            for (std::size_t tok = 0; tok < n; ++tok)
                concat[tok * cc + dest + ch] = back[tok].real();
        }
    };

    std::vector<std::vector<Cplx>> x90;
    complex_branch(full ? 0 : ac, 0.5, "branch45", ac, nullptr);
    complex_branch(full ? 0 : 2 * ac, 1.0, "branch90", 2 * ac, &x90);

    // log branch on the saved 90-degree transform
    {
        const Tensor& kker = w.get(prefix + "branchlog.kernel");
        const Tensor& kb = w.get(prefix + "branchlog.bias");
        std::vector<std::vector<Cplx>> rec(ac, std::vector<Cplx>(n));
        for (std::size_t tok = 0; tok < n; ++tok) {
            std::vector<double> a(ac), alog(ac);
            std::vector<Cplx> phase(ac);
            for (std::int64_t ch = 0; ch < ac; ++ch) {
                const double mag = std::abs(x90[ch][tok]);
                a[ch] = std::log1p(mag);
                phase[ch] = mag < 1e-300 ? Cplx(1, 0) : x90[ch][tok] / mag;
            }
            for (std::int64_t o = 0; o < ac; ++o) {
                double acc = kb.data[o];
                for (std::int64_t i = 0; i < ac; ++i) acc += kker.data[o * ac + i] * a[i];
                alog[o] = acc > 0 ? acc : 0;
            }
            for (std::int64_t ch = 0; ch < ac; ++ch)
                rec[ch][tok] = std::expm1(alog[ch]) * phase[ch];
        }
        for (std::int64_t ch = 0; ch < ac; ++ch) {
            const std::vector<Cplx> back = frft_channel_naive(rec[ch], d, -1.0, plans);
            for (std::size_t tok = 0; tok < n; ++tok)
                concat[tok * cc + 3 * ac + ch] = back[tok].real();
        }
    }

    for (std::size_t tok = 0; tok < n; ++tok)
        for (std::int64_t ch = 0; ch < c; ++ch)
            concat[tok * cc + 4 * ac + ch] = t.data[tok * c + ch];

    // segment norms then pointwise fusion
    auto seg_norm = [&](std::int64_t c0, std::int64_t len, const char* name) {
        const std::vector<double>& scale = w.get(prefix + name + std::string(".scale")).data;
        const std::vector<double>& offset = w.get(prefix + name + std::string(".offset")).data;
        for (std::size_t tok = 0; tok < n; ++tok) {
            double mean = 0;
            for (std::int64_t i = 0; i < len; ++i) mean += concat[tok * cc + c0 + i];
            mean /= static_cast<double>(len);
            double var = 0;
            for (std::int64_t i = 0; i < len; ++i) {
                const double dlt = concat[tok * cc + c0 + i] - mean;
                var += dlt * dlt;
            }
            var /= static_cast<double>(len);
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            for (std::int64_t i = 0; i < len; ++i)
                concat[tok * cc + c0 + i] =
                    (concat[tok * cc + c0 + i] - mean) * inv * scale[i] + offset[i];
        }
    };
    seg_norm(0, ac, "seg0");
    seg_norm(ac, ac, "seg45");
    seg_norm(2 * ac, ac, "seg90");
    seg_norm(3 * ac, ac, "seglog");
    seg_norm(4 * ac, c, "segskip");

    const Tensor& fk = w.get(prefix + "fusion.kernel");
    const Tensor& fb = w.get(prefix + "fusion.bias");
    std::vector<double> out(n * static_cast<std::size_t>(c));
    for (std::size_t tok = 0; tok < n; ++tok)
        for (std::int64_t o = 0; o < c; ++o) {
            double acc = fb.data[o];
            for (std::int64_t i = 0; i < cc; ++i) acc += fk.data[o * cc + i] * concat[tok * cc + i];
            out[tok * c + o] = acc;
        }
    return out;
}

}  // namespace

TEST_CASE("patch_embed produces the documented ACDC-scale token grid") {
    const Dims3 d{16, 128, 128};
    Volume3D v(d, Spacing3{10.0, 1.8, 1.8}, std::vector<double>(d.voxels(), 0.5));
    const PatchEmbedConfig cfg;  // P = 4, d = 48
    const WeightSet w = make_patch_embed_weights(cfg, 1);
    const TokenGrid t = patch_embed(v, cfg, w);
    CHECK(t.dims == Dims3{4, 32, 32});
    CHECK(t.channels == 48);
    CHECK(t.tokens() == 4096);
    CHECK(t.level == 0);
}

TEST_CASE("patch_embed: zero projection gives zero tokens; divisibility enforced") {
    const Dims3 d{4, 4, 4};
    Volume3D v(d, Spacing3{}, std::vector<double>(d.voxels(), 1.0));
    PatchEmbedConfig cfg;
    cfg.patch_z = cfg.patch_y = cfg.patch_x = 2;
    cfg.embed_dim = 5;
    WeightSet w = make_patch_embed_weights(cfg, 2);
    std::fill(w.get_mutable("embed.proj").data.begin(), w.get_mutable("embed.proj").data.end(),
              0.0);
    const TokenGrid t = patch_embed(v, cfg, w);
    for (double x : t.data) CHECK(x == 0.0);

    PatchEmbedConfig bad = cfg;
    bad.patch_x = 3;
    CHECK_THROWS_AS(patch_embed(v, bad, w), std::invalid_argument);
}

TEST_CASE("patch_embed with an identity-extension projection copies the patch prefix") {
    const Dims3 d{2, 2, 4};
    std::vector<double> data(d.voxels());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(i) * 0.25;
    const Volume3D v(d, Spacing3{}, std::move(data));
    PatchEmbedConfig cfg;
    cfg.patch_z = cfg.patch_y = cfg.patch_x = 2;
    cfg.embed_dim = 3;  // identity extension keeps the first 3 flattened entries
    WeightSet w = make_patch_embed_weights(cfg, 3);
    Tensor& e = w.get_mutable("embed.proj");
    std::fill(e.data.begin(), e.data.end(), 0.0);
    for (std::int64_t i = 0; i < 3; ++i) e.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;

    const TokenGrid t = patch_embed(v, cfg, w);
    // patch at (0,0,0): flattened order (dz,dy,dx) -> v(0,0,0), v(0,0,1), v(0,1,0)
    CHECK(t.at(0, 0, 0, 0) == v.at(0, 0, 0));
    CHECK(t.at(0, 0, 0, 1) == v.at(0, 0, 1));
    CHECK(t.at(0, 0, 0, 2) == v.at(0, 1, 0));
    // matrix-product oracle on the second patch
    const std::int64_t px = 1;
    double flat[8];
    int k = 0;
    for (std::int64_t dz = 0; dz < 2; ++dz)
        for (std::int64_t dy = 0; dy < 2; ++dy)
            for (std::int64_t dx = 0; dx < 2; ++dx) flat[k++] = v.at(dz, dy, 2 * px + dx);
    for (std::int64_t o = 0; o < 3; ++o) {
        double acc = 0;
        for (std::int64_t i = 0; i < 8; ++i) acc += flat[i] * e.data[static_cast<std::size_t>(i * 3 + o)];
        CHECK(t.at(0, 0, px, o) == doctest::Approx(acc).epsilon(1e-15));
    }
}

TEST_CASE("frft_feature_extract preserves shape") {
    const Dims3 d{2, 2, 2};
    const std::int64_t c = 6;
    const TokenGrid t = random_grid(0, d, c, 4);
    const FcaConfig cfg;
    const WeightSet w = make_extractor_weights(c, 1.0, 5);
    const AxisPlans plans = make_axis_plans(d);
    const TokenGrid out = frft_feature_extract(t, cfg, w, plans);
    CHECK(out.dims == d);
    CHECK(out.channels == c);
}

TEST_CASE("branch suppression: zero branches plus a skip-passing fusion reproduce the "
          "normalized input") {
    const Dims3 d{2, 3, 2};
    const std::int64_t c = 4;
    const TokenGrid t = random_grid(0, d, c, 6);
    FcaConfig cfg;
    WeightSet w = make_extractor_weights(c, 1.0, 7);
    for (const char* name : {"branch0", "branch45", "branch90", "branchlog"}) {
        auto& kk = w.get_mutable(std::string("ex.") + name + ".kernel").data;
        std::fill(kk.begin(), kk.end(), 0.0);
        auto& bb = w.get_mutable(std::string("ex.") + name + ".bias").data;
        std::fill(bb.begin(), bb.end(), 0.0);
    }
    auto& fk = w.get_mutable("ex.fusion.kernel");
    std::fill(fk.data.begin(), fk.data.end(), 0.0);
    const std::int64_t cc = 5 * c;
    for (std::int64_t o = 0; o < c; ++o) fk.data[static_cast<std::size_t>(o * cc + 4 * c + o)] = 1.0;
    std::fill(w.get_mutable("ex.fusion.bias").data.begin(),
              w.get_mutable("ex.fusion.bias").data.end(), 0.0);

    const AxisPlans plans = make_axis_plans(d);
    const TokenGrid out = frft_feature_extract(t, cfg, w, plans);
    const TokenGrid expect = layer_norm_channels(t, std::vector<double>(c, 1.0),
                                                 std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == expect.data[i]);
}

TEST_CASE("extractor matches the straight-line oracle on a 1x1x1 grid") {
    // FrFT on length-1 axes is the identity, so the hand evaluation is pure
    // channel arithmetic.
    const Dims3 d{1, 1, 1};
    const std::int64_t c = 3;
    const TokenGrid t = random_grid(0, d, c, 8);
    const FcaConfig cfg;
    const WeightSet w = make_extractor_weights(c, 1.0, 9);
    const AxisPlans plans = make_axis_plans(d);
    const TokenGrid out = frft_feature_extract(t, cfg, w, plans);
    const std::vector<double> expect = extractor_oracle(t, w, "ex.", plans, 1.0);
    REQUIRE(out.data.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("extractor matches the straight-line oracle on a 2x2x2 grid with real transforms") {
    const Dims3 d{2, 2, 2};
    const std::int64_t c = 4;
    const TokenGrid t = random_grid(0, d, c, 10);
    const FcaConfig cfg;
    const WeightSet w = make_extractor_weights(c, 1.0, 11);
    const AxisPlans plans = make_axis_plans(d);
    const TokenGrid out = frft_feature_extract(t, cfg, w, plans);
    const std::vector<double> expect = extractor_oracle(t, w, "ex.", plans, 1.0);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("extractor channel splitting: alpha = 1/2 on 4 channels needs 3*ac <= C") {
    const Dims3 d{1, 2, 2};
    const TokenGrid t = random_grid(0, d, 4, 12);
    FcaConfig cfg;
    cfg.channel_coeff = 0.5;  // ac = 2, 3*ac = 6 > 4
    const WeightSet w = make_extractor_weights(4, 0.5, 13);
    const AxisPlans plans = make_axis_plans(d);
    CHECK_THROWS_AS(frft_feature_extract(t, cfg, w, plans), std::invalid_argument);

    // alpha = 1/3 on 6 channels splits exactly
    FcaConfig cfg3;
    cfg3.channel_coeff = 1.0 / 3.0;
    const TokenGrid t6 = random_grid(0, d, 6, 14);
    const WeightSet w6 = make_extractor_weights(6, 1.0 / 3.0, 15);
    const TokenGrid out = frft_feature_extract(t6, cfg3, w6, plans);
    CHECK(out.channels == 6);
    const std::vector<double> expect = extractor_oracle(t6, w6, "ex.", plans, 1.0 / 3.0);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("alpha*C must be a positive integer") {
    CHECK_THROWS_AS(branch_channels(5, 0.5), std::invalid_argument);
    CHECK(branch_channels(48, 1.0 / 3.0) == 16);
    CHECK_THROWS_AS(count_branch_params(1, 1.0 / 3.0), std::invalid_argument);
}

TEST_CASE("cross_attention: a single token attends to itself with weight 1") {
    const Dims3 d{1, 1, 1};
    const std::int64_t c = 4;
    const TokenGrid q = random_grid(0, d, c, 16);
    const TokenGrid kv = random_grid(0, d, c, 17);
    const WeightSet w = make_attention_weights(c, 18);
    const TokenGrid out = cross_attention(q, kv, w, 2);
    // output = V projection of the single kv token
    for (std::int64_t o = 0; o < c; ++o) {
        double acc = w.get("attn.bv").data[o];
        for (std::int64_t i = 0; i < c; ++i)
            acc += kv.data[i] * w.get("attn.wv").data[static_cast<std::size_t>(i * c + o)];
        CHECK(out.data[o] == doctest::Approx(acc).epsilon(1e-12));
    }
    const std::vector<double> rows = attention_row_weights(q, kv, w, 2);
    for (double r : rows) CHECK(r == 1.0);
}

TEST_CASE("identical keys give uniform attention") {
    const Dims3 d{1, 2, 2};
    const std::int64_t c = 4;
    const TokenGrid q = random_grid(0, d, c, 19);
    TokenGrid kv(0, d, c);
    for (std::size_t tok = 0; tok < kv.tokens(); ++tok)
        for (std::int64_t i = 0; i < c; ++i) kv.data[tok * c + i] = 0.3 * static_cast<double>(i);
    const WeightSet w = make_attention_weights(c, 20);
    const std::vector<double> rows = attention_row_weights(q, kv, w, 2);
    for (double r : rows) CHECK(r == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("cross_attention matches a hand-computed 3-token oracle") {
    const Dims3 d{1, 1, 3};
    const std::int64_t c = 2;
    const TokenGrid q = random_grid(0, d, c, 21);
    const TokenGrid kv = random_grid(0, d, c, 22);
    const WeightSet w = make_attention_weights(c, 23);
    const TokenGrid out = cross_attention(q, kv, w, 1);

    // brute-force oracle enumerating all 3x3 attention entries
    auto project = [&](const TokenGrid& g, const char* wn, const char* bn, double* dst) {
        for (int tok = 0; tok < 3; ++tok)
            for (std::int64_t o = 0; o < c; ++o) {
                double acc = w.get(std::string("attn.") + bn).data[o];
                for (std::int64_t i = 0; i < c; ++i)
                    acc += g.data[static_cast<std::size_t>(tok * c + i)] *
                           w.get(std::string("attn.") + wn).data[static_cast<std::size_t>(i * c + o)];
                dst[tok * c + o] = acc;
            }
    };
    double qp[6], kp[6], vp[6];
    project(q, "wq", "bq", qp);
    project(kv, "wk", "bk", kp);
    project(kv, "wv", "bv", vp);
    const double scale = 1.0 / std::sqrt(2.0);
    for (int r = 0; r < 3; ++r) {
        double logits[3];
        for (int col = 0; col < 3; ++col) {
            logits[col] = 0;
            for (std::int64_t i = 0; i < c; ++i) logits[col] += qp[r * c + i] * kp[col * c + i];
            logits[col] *= scale;
        }
        const double mx = std::max({logits[0], logits[1], logits[2]});
        double weights[3], sum = 0;
        for (int col = 0; col < 3; ++col) {
            weights[col] = std::exp(logits[col] - mx);
            sum += weights[col];
        }
        double rowsum = 0;
        for (int col = 0; col < 3; ++col) {
            weights[col] /= sum;
            rowsum += weights[col];
        }
        CHECK(std::abs(rowsum - 1.0) <= 1e-12);
        for (std::int64_t o = 0; o < c; ++o) {
            double acc = 0;
            for (int col = 0; col < 3; ++col) acc += weights[col] * vp[col * c + o];
            CHECK(out.data[static_cast<std::size_t>(r * c + o)] ==
                  doctest::Approx(acc).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention rows are probability vectors on random instances") {
    std::mt19937_64 rng(24);
    for (int rep = 0; rep < 5; ++rep) {
        const Dims3 d{1 + static_cast<std::int64_t>(rng() % 2), 2, 2};
        const std::int64_t c = 8;
        const TokenGrid q = random_grid(0, d, c, 200 + rep, 3.0);
        const TokenGrid kv = random_grid(0, d, c, 300 + rep, 3.0);
        const WeightSet w = make_attention_weights(c, 400 + rep);
        const int heads = 4;
        const std::vector<double> rows = attention_row_weights(q, kv, w, heads);
        const std::size_t n = q.tokens();
        for (int h = 0; h < heads; ++h)
            for (std::size_t r = 0; r < n; ++r) {
                double sum = 0;
                for (std::size_t col = 0; col < n; ++col) {
                    const double v = rows[(h * n + r) * n + col];
                    CHECK(v >= 0.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
    }
}

TEST_CASE("fca_block: equal streams with symmetric weights give identical outputs") {
    const Dims3 d{1, 2, 2};
    const std::int64_t c = 4;
    const TokenGrid f = random_grid(0, d, c, 25);
    FcaConfig cfg;
    cfg.heads = 2;
    const WeightSet w = make_fca_block_weights(c, 1.0, 2, 26, /*symmetric_streams=*/true);
    const AxisPlans plans = make_axis_plans(d);
    const auto [out_m, out_f] = fca_block(f, f, cfg, w, plans);
    CHECK(out_m.data == out_f.data);

    // stream exchange swaps the outputs
    const TokenGrid g = random_grid(0, d, c, 27);
    const auto [a_m, a_f] = fca_block(f, g, cfg, w, plans);
    const auto [b_m, b_f] = fca_block(g, f, cfg, w, plans);
    for (std::size_t i = 0; i < a_m.data.size(); ++i) {
        CHECK(a_m.data[i] == b_f.data[i]);
        CHECK(a_f.data[i] == b_m.data[i]);
    }
}

TEST_CASE("fca_block with zero MLP and zero output projection reduces to normalized residuals") {
    const Dims3 d{1, 2, 2};
    const std::int64_t c = 4;
    const TokenGrid f_m = random_grid(0, d, c, 28);
    const TokenGrid f_f = random_grid(0, d, c, 29);
    FcaConfig cfg;
    cfg.heads = 2;
    WeightSet w = make_fca_block_weights(c, 1.0, 2, 30);
    for (const char* n : {"mf.attn.wo", "mf.attn.bo", "fm.attn.wo", "fm.attn.bo", "m.post.mlp.w1",
                          "m.post.mlp.b1", "m.post.mlp.w2", "m.post.mlp.b2", "f.post.mlp.w1",
                          "f.post.mlp.b1", "f.post.mlp.w2", "f.post.mlp.b2"}) {
        auto& data = w.get_mutable(n).data;
        std::fill(data.begin(), data.end(), 0.0);
    }
    const AxisPlans plans = make_axis_plans(d);
    const auto [out_m, out_f] = fca_block(f_m, f_f, cfg, w, plans);
    const TokenGrid o_m = frft_feature_extract(f_m, cfg, w, plans, "m.ex.");
    const TokenGrid expect = layer_norm_channels(o_m, w.get("m.post.ln.scale").data,
                                                 w.get("m.post.ln.offset").data);
    for (std::size_t i = 0; i < expect.data.size(); ++i)
        CHECK(out_m.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-12));
    for (double v : out_f.data) CHECK(std::isfinite(v));
    CHECK(out_m.dims == d);
    CHECK(out_f.channels == c);
}

TEST_CASE("fca_block matches an independent straight-line oracle on a tiny instance") {
    const Dims3 d{1, 2, 2};
    const std::int64_t c = 4;
    const int heads = 2;
    const TokenGrid f_m = random_grid(0, d, c, 31);
    const TokenGrid f_f = random_grid(0, d, c, 32);
    FcaConfig cfg;
    cfg.heads = heads;
    const WeightSet w = make_fca_block_weights(c, 1.0, heads, 33);
    const AxisPlans plans = make_axis_plans(d);
    const auto [out_m, out_f] = fca_block(f_m, f_f, cfg, w, plans);

    // oracle: extractor, attention, projection, residual, LN, MLP, residual
    const std::vector<double> o_m = extractor_oracle(f_m, w, "m.ex.", plans, 1.0);
    const std::vector<double> o_f = extractor_oracle(f_f, w, "f.ex.", plans, 1.0);
    const std::size_t n = f_m.tokens();

    auto run_post = [&](const std::vector<double>& oq, const std::vector<double>& okv,
                        const std::string& attn, const std::string& post) {
        auto lin = [&](const std::vector<double>& x, const std::string& wn,
                       const std::string& bn, std::int64_t co) {
            std::vector<double> y(n * co);
            for (std::size_t tok = 0; tok < n; ++tok)
                for (std::int64_t o = 0; o < co; ++o) {
                    double acc = w.get(bn).data[o];
                    for (std::int64_t i = 0; i < c; ++i)
                        acc += x[tok * c + i] * w.get(wn).data[static_cast<std::size_t>(i * co + o)];
                    y[tok * co + o] = acc;
                }
            return y;
        };
        const std::vector<double> qp = lin(oq, attn + "wq", attn + "bq", c);
        const std::vector<double> kp = lin(okv, attn + "wk", attn + "bk", c);
        const std::vector<double> vp = lin(okv, attn + "wv", attn + "bv", c);
        const std::int64_t dk = c / heads;
        std::vector<double> att(n * c, 0.0);
        for (int h = 0; h < heads; ++h) {
            for (std::size_t r = 0; r < n; ++r) {
                std::vector<double> logits(n, 0.0);
                for (std::size_t col = 0; col < n; ++col)
                    for (std::int64_t i = 0; i < dk; ++i)
                        logits[col] += qp[r * c + h * dk + i] * kp[col * c + h * dk + i];
                double mx = logits[0];
                for (double v : logits) mx = std::max(mx, v);
                double sum = 0;
                for (double& v : logits) {
                    v = std::exp(v / std::sqrt(static_cast<double>(dk)) -
                                 mx / std::sqrt(static_cast<double>(dk)));
                    sum += v;
                }
                for (std::size_t col = 0; col < n; ++col)
                    for (std::int64_t i = 0; i < dk; ++i)
                        att[r * c + h * dk + i] += logits[col] / sum * vp[col * c + h * dk + i];
            }
        }
        // output projection + residual
        std::vector<double> y(n * c);
        for (std::size_t tok = 0; tok < n; ++tok)
            for (std::int64_t o = 0; o < c; ++o) {
                double acc = w.get(attn + "bo").data[o];
                for (std::int64_t i = 0; i < c; ++i)
                    acc += att[tok * c + i] * w.get(attn + "wo").data[static_cast<std::size_t>(i * c + o)];
                y[tok * c + o] = acc + oq[tok * c + o];
            }
        const std::vector<double> h1 = norm_channels_naive(y, n, c, w.get(post + "ln.scale").data,
                                                           w.get(post + "ln.offset").data);
        // MLP with exact GELU and the second residual
        std::vector<double> out(n * c);
        for (std::size_t tok = 0; tok < n; ++tok) {
            std::vector<double> hidden(4 * c);
            for (std::int64_t o = 0; o < 4 * c; ++o) {
                double acc = w.get(post + "mlp.b1").data[o];
                for (std::int64_t i = 0; i < c; ++i)
                    acc += h1[tok * c + i] *
                           w.get(post + "mlp.w1").data[static_cast<std::size_t>(i * 4 * c + o)];
                hidden[o] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
            }
            for (std::int64_t o = 0; o < c; ++o) {
                double acc = w.get(post + "mlp.b2").data[o];
                for (std::int64_t i = 0; i < 4 * c; ++i)
                    acc += hidden[i] *
                           w.get(post + "mlp.w2").data[static_cast<std::size_t>(i * c + o)];
                out[tok * c + o] = acc + h1[tok * c + o];
            }
        }
        return out;
    };
    const std::vector<double> expect_m = run_post(o_m, o_f, "mf.attn.", "m.post.");
    const std::vector<double> expect_f = run_post(o_f, o_m, "fm.attn.", "f.post.");
    for (std::size_t i = 0; i < expect_m.size(); ++i) {
        CHECK(out_m.data[i] == doctest::Approx(expect_m[i]).epsilon(1e-10));
        CHECK(out_f.data[i] == doctest::Approx(expect_f[i]).epsilon(1e-10));
    }
}

TEST_CASE("level transitions follow the doubling rule") {
    const TokenGrid t0 = random_grid(0, Dims3{4, 32, 32}, 48, 34, 0.1);
    const TokenGrid t1 = level_down(t0, make_level_down_weights(48, 35));
    CHECK(t1.dims == Dims3{2, 16, 16});
    CHECK(t1.channels == 96);
    CHECK(t1.level == 1);
    const TokenGrid t2 = level_down(t1, make_level_down_weights(96, 36));
    CHECK(t2.dims == Dims3{1, 8, 8});
    CHECK(t2.channels == 192);

    // odd dims are rejected
    CHECK_THROWS_AS(level_down(t2, make_level_down_weights(192, 37)), std::invalid_argument);

    // shape round trip: up from t2 with the t1 skip restores t1's shape
    const TokenGrid up = level_up(t2, t1, make_level_up_weights(96, 38));
    CHECK(up.dims == t1.dims);
    CHECK(up.channels == t1.channels);
    CHECK(up.level == t1.level);

    // skip shape mismatch is rejected
    CHECK_THROWS_AS(level_up(t2, t0, make_level_up_weights(96, 39)), std::invalid_argument);
}

TEST_CASE("count_branch_params reproduces the published cost table") {
    SUBCASE("C = 48, alpha = 1") {
        const BranchCosts b = count_branch_params(48, 1.0);
        CHECK(b.frft0 == 62208);
        CHECK(b.frft45 == 9216);
        CHECK(b.frft90 == 9216);
        CHECK(b.logmag == 2304);
        CHECK(b.total == 82944);
    }
    SUBCASE("C = 48, alpha = 1/3 is one ninth of the full model") {
        CHECK(count_branch_params(48, 1.0 / 3.0).total == 9216);
        CHECK(count_branch_params(48, 1.0).total == 9 * count_branch_params(48, 1.0 / 3.0).total);
    }
    SUBCASE("C = 1, alpha = 1") {
        const BranchCosts b = count_branch_params(1, 1.0);
        CHECK(b.frft0 == 27);
        CHECK(b.frft45 == 4);
        CHECK(b.frft90 == 4);
        CHECK(b.logmag == 1);
        CHECK(b.total == 36);
    }
}

TEST_CASE("count_flops scales the parameter split by the voxel count") {
    const BranchCosts f = count_flops(48, 1.0, Dims3{4, 32, 32});
    CHECK(f.total == 339738624ULL);
    const BranchCosts unit = count_flops(7, 1.0, Dims3{1, 1, 1});
    const BranchCosts p = count_branch_params(7, 1.0);
    CHECK(unit.total == p.total);
    CHECK(unit.frft0 == p.frft0);
}

TEST_CASE("WeightSet enumeration reproduces the branch parameter counts") {
    for (double alpha : {1.0, 1.0 / 3.0}) {
        const std::int64_t c = 48;
        const WeightSet w = make_extractor_weights(c, alpha, 40);
        unsigned long long kernels = 0;
        for (const auto& [name, t] : w.tensors())
            if (name.find("branch") != std::string::npos && name.ends_with(".kernel"))
                kernels += t.count();
        CHECK(kernels == count_branch_params(c, alpha).total);
    }
}

TEST_CASE("shape audit rejects a tampered WeightSet") {
    WeightSet w = make_extractor_weights(8, 1.0, 41);
    CHECK_NOTHROW(audit_shapes(w, expected_extractor_shapes(8, 1.0)));
    w.get_mutable("ex.fusion.kernel").shape[0] = 7;
    CHECK_THROWS_AS(audit_shapes(w, expected_extractor_shapes(8, 1.0)), std::invalid_argument);
}

TEST_CASE("forward passes are bit-identical across runs and thread caps") {
    const Dims3 d{2, 4, 4};
    const std::int64_t c = 6;
    const TokenGrid t = random_grid(0, d, c, 42);
    FcaConfig cfg;
    cfg.heads = 2;
    const WeightSet w = make_fca_block_weights(c, 1.0, 2, 43);
    const AxisPlans plans = make_axis_plans(d);

    set_max_threads(1);
    const auto [m1, f1] = fca_block(t, random_grid(0, d, c, 44), cfg, w, plans);
    set_max_threads(3);
    const auto [m2, f2] = fca_block(t, random_grid(0, d, c, 44), cfg, w, plans);
    set_max_threads(1);
    CHECK(std::memcmp(m1.data.data(), m2.data.data(), m1.data.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(f1.data.data(), f2.data.data(), f1.data.size() * sizeof(double)) == 0);
}

TEST_CASE("shape preservation holds over random valid shapes") {
    std::mt19937_64 rng(45);
    for (int rep = 0; rep < 4; ++rep) {
        const Dims3 d{1 + static_cast<std::int64_t>(rng() % 3),
                      1 + static_cast<std::int64_t>(rng() % 3),
                      1 + static_cast<std::int64_t>(rng() % 3)};
        const std::int64_t c = 2 * (1 + static_cast<std::int64_t>(rng() % 3));
        FcaConfig cfg;
        cfg.heads = 2;
        const WeightSet w = make_fca_block_weights(c, 1.0, 2, 500 + rep);
        const AxisPlans plans = make_axis_plans(d);
        const auto [om, of] = fca_block(random_grid(0, d, c, 600 + rep),
                                        random_grid(0, d, c, 700 + rep), cfg, w, plans);
        CHECK(om.dims == d);
        CHECK(om.channels == c);
        CHECK(of.dims == d);
        CHECK(of.channels == c);
    }
}
