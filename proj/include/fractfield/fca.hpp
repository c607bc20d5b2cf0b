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
#ifndef FRACTFIELD_FCA_HPP
#define FRACTFIELD_FCA_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fractfield/dfrft.hpp"
#include "fractfield/volume.hpp"

namespace fractfield {

/// Level-indexed feature tensor, layout (z, y, x, c) with c fastest.
struct TokenGrid {
    int level = 0;
    Dims3 dims;
    std::int64_t channels = 0;
    std::vector<double> data;

    TokenGrid() = default;
    TokenGrid(int level, Dims3 dims, std::int64_t channels);
    TokenGrid(int level, Dims3 dims, std::int64_t channels, std::vector<double> data);

    std::size_t tokens() const { return dims.voxels(); }
    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x, std::int64_t c) const {
        return (((static_cast<std::size_t>(z) * dims.h + y) * dims.w + x) *
                static_cast<std::size_t>(channels)) +
               static_cast<std::size_t>(c);
    }
    double at(std::int64_t z, std::int64_t y, std::int64_t x, std::int64_t c) const {
        return data[index(z, y, x, c)];
    }
};

struct PatchEmbedConfig {
    std::int64_t patch_z = 4, patch_y = 4, patch_x = 4;
    std::int64_t embed_dim = 48;
};

struct FcaConfig {
    double channel_coeff = 1.0;  // alpha: fraction of channels each FrFT branch processes
    int heads = 4;
    int levels = 3;
    std::vector<int> blocks_per_level = {2, 2, 2};
    int spatial_kernel = 3;
    int spectral_kernel = 1;
};

/// Named weight tensors. Linear layers are stored [in, out] and applied as
/// y = x*W + b; convolution kernels as [out, in, kz, ky, kx] (pointwise
/// kernels drop the unit spatial dims and are stored [out, in]).
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    std::size_t count() const;
};

class WeightSet {
public:
    Tensor& add(const std::string& name, std::vector<std::int64_t> shape);
    const Tensor& get(const std::string& name) const;
    Tensor& get_mutable(const std::string& name);
    bool has(const std::string& name) const;
    const std::map<std::string, Tensor>& tensors() const { return tensors_; }

    /// Deterministic initialization: tensors visited in name order, entries
    /// drawn uniform in [lo, hi] from one seeded generator.
    void fill_seeded_uniform(std::uint64_t seed, double lo = -0.02, double hi = 0.02);
    void merge(const WeightSet& other);

private:
    std::map<std::string, Tensor> tensors_;
};

// --- weight construction and shape audits -------------------------------

using ShapeList = std::vector<std::pair<std::string, std::vector<std::int64_t>>>;

WeightSet make_patch_embed_weights(const PatchEmbedConfig& cfg, std::uint64_t seed);

/// Extractor tensors under `prefix`: input norm, the four branch
/// convolutions (Table-1 shapes), the five pre-fusion segment norms
/// (branch order then skip), and the fusion pointwise convolution.
WeightSet make_extractor_weights(std::int64_t channels, double alpha, std::uint64_t seed,
                                 const std::string& prefix = "ex.");
/// Q/K/V/output projections under `prefix`.
WeightSet make_attention_weights(std::int64_t channels, std::uint64_t seed,
                                 const std::string& prefix = "attn.");
/// Whole block: "m.ex.*", "f.ex.*", "mf.attn.*", "fm.attn.*", "m.post.*",
/// "f.post.*". symmetric_streams makes the m/f and mf/fm tensors equal.
WeightSet make_fca_block_weights(std::int64_t channels, double alpha, int heads,
                                 std::uint64_t seed, bool symmetric_streams = false);
WeightSet make_level_down_weights(std::int64_t channels, std::uint64_t seed);
WeightSet make_level_up_weights(std::int64_t fine_channels, std::uint64_t seed);

ShapeList expected_extractor_shapes(std::int64_t channels, double alpha,
                                    const std::string& prefix = "ex.");
ShapeList expected_attention_shapes(std::int64_t channels, const std::string& prefix = "attn.");
ShapeList expected_fca_block_shapes(std::int64_t channels, double alpha, int heads);

/// Verifies that `ws` holds exactly the expected tensors with the expected
/// shapes. Throws on any mismatch. Forward operations run this before
/// touching the data.
void audit_shapes(const WeightSet& ws, const ShapeList& expected);

// --- forward operations --------------------------------------------------

/// Non-overlapping patch embedding: x^i * E per patch, no bias.
TokenGrid patch_embed(const Volume3D& v, const PatchEmbedConfig& cfg, const WeightSet& w);

/// Layer normalization over the channel axis with learned scale/offset.
TokenGrid layer_norm_channels(const TokenGrid& t, const std::vector<double>& scale,
                              const std::vector<double>& offset);

/// Four-branch FrFT feature extractor. Branch pipeline: normalize, FrFT at
/// the branch order, convolution (kernel 3 spatial / kernel 1 spectral),
/// ReLU, inverse FrFT, real part. The log branch operates on
/// log(1 + |X_90|), inverts with exp - 1 and the saved phase before the
/// inverse transform. Branch outputs and the input skip are concatenated
/// (order: 0deg, 45deg, 90deg, log, skip), segment-normalized, and fused
/// back to C channels by a pointwise convolution.
TokenGrid frft_feature_extract(const TokenGrid& t, const FcaConfig& cfg, const WeightSet& w,
                               const AxisPlans& plans, const std::string& prefix = "ex.");

/// Multi-head cross-attention, Q from q_src, K and V from kv_src:
/// concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h. No output projection here;
/// the block applies it.
TokenGrid cross_attention(const TokenGrid& q_src, const TokenGrid& kv_src, const WeightSet& w,
                          int heads, const std::string& prefix = "attn.");

/// The softmax attention matrices themselves, stacked [head][row][col]
/// row-major (heads * N * N values). Every row is a probability vector.
std::vector<double> attention_row_weights(const TokenGrid& q_src, const TokenGrid& kv_src,
                                          const WeightSet& w, int heads,
                                          const std::string& prefix = "attn.");

/// Full FCA block: both streams through the extractor, bidirectional
/// cross-attention with output projection, residual, layer norm, MLP,
/// second residual. Returns (moving, fixed) outputs.
std::pair<TokenGrid, TokenGrid> fca_block(const TokenGrid& f_m, const TokenGrid& f_f,
                                          const FcaConfig& cfg, const WeightSet& w,
                                          const AxisPlans& plans);

/// Encoder transition: spatial dims halve (2x2x2 token gather), channels
/// double through a linear merge. Needs even spatial dims.
TokenGrid level_down(const TokenGrid& t, const WeightSet& w, const std::string& prefix = "down.");
/// Decoder transition: linear projection to the fine channel count, nearest
/// upsampling, concatenation with the skip, linear fusion halving 2C to C.
TokenGrid level_up(const TokenGrid& t, const TokenGrid& skip, const WeightSet& w,
                   const std::string& prefix = "up.");

// --- cost accounting ------------------------------------------------------

/// Convolution kernel-weight counts per extractor branch (biases excluded).
struct BranchCosts {
    unsigned long long frft0 = 0, frft45 = 0, frft90 = 0, logmag = 0, total = 0;
};
BranchCosts count_branch_params(std::int64_t channels, double alpha);
BranchCosts count_flops(std::int64_t channels, double alpha, const Dims3& grid);

/// round(alpha * C), validating that it is a positive integer.
std::int64_t branch_channels(std::int64_t channels, double alpha);

}  // namespace fractfield

#endif
