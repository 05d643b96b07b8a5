#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hba/attention.hpp"
#include "hba/ops.hpp"

namespace hba {

// Ablation ladder. Each step adds parameters on top of the previous one and
// removes none.
enum class Variant { Unet, UnetResnet, SelfAtt, Hba1, HbaAll };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);
inline constexpr Variant kVariantLadder[5] = {Variant::Unet, Variant::UnetResnet, Variant::SelfAtt,
                                              Variant::Hba1, Variant::HbaAll};

struct NetworkConfig {
    int levels = 3;
    int base_channels = 8;
    int stem_channels = 0; // 0 -> base_channels
    int channel_mult = 2;
    int blocks_per_level = 1;
    int attn_grid = 8; // S: every attention site is pooled to S x S
    Variant variant = Variant::HbaAll;
    int input_size = 128; // square inputs
    int out_classes = 2;  // fovea, OD
    bool concat_input = true; // feed the original image into the head
    int heads = 4;
    int attn_key_dim = 0;   // 0 -> site channels / heads
    int attn_value_dim = 0; // 0 -> site channels / heads
    int mlp_reduction = 8;
    bool qk_scaling = false;
    bool softmax_over_heads = false;

    int stem() const { return stem_channels > 0 ? stem_channels : base_channels; }
    int width(int level) const;
    int bottom_width() const { return width(levels); }
    int side(int level) const { return input_size >> level; } // skip resolution
    bool attn_at_bottom() const { return variant != Variant::Unet && variant != Variant::UnetResnet; }
    bool attn_at_skips() const { return variant == Variant::HbaAll; }
    bool residual_encoder() const { return variant != Variant::Unet; }

    HbaConfig attn_config(int site_channels) const;
    void validate() const;

    std::string serialize() const;
    static NetworkConfig deserialize(const std::string& text);
    std::uint64_t digest() const;
};

// conv kernel + batch-norm parameters and running statistics
template <class Real>
struct ConvBn {
    TensorPtr<Real> w;
    TensorPtr<Real> gamma, beta;
    TensorPtr<Real> run_mean, run_var;
};

template <class Real>
struct BlockParams {
    ConvBn<Real> c1, c2;
    std::optional<ConvBn<Real>> shortcut; // 1x1 projection when widths differ
    bool residual = false;
};

template <class Real>
struct DecoderLevel {
    ConvBn<Real> up;        // 3x3 conv after upsampling
    BlockParams<Real> fuse; // double conv over the concatenated maps
};

template <class Real>
struct ModelParams {
    NetworkConfig cfg;
    ConvBn<Real> stem;
    std::vector<std::vector<BlockParams<Real>>> enc; // [level][block]
    std::vector<BlockParams<Real>> bottom;
    std::optional<HbaParams<Real>> bottom_attn;
    std::vector<std::optional<HbaParams<Real>>> skip_attn; // one slot per level
    std::vector<DecoderLevel<Real>> dec;                   // index = level
    TensorPtr<Real> head_w, head_b;
};

template <class Real>
struct NamedTensor {
    std::string name;
    TensorPtr<Real> tensor;
    bool learnable = true;
};

// deterministic He-normal initialization from the seed
template <class Real>
ModelParams<Real> build_model(const NetworkConfig& cfg, std::uint64_t seed);

enum class RunMode { Train, Eval };

struct ForwardOpts {
    bool update_running = false;    // fold batch stats into the running buffers
    bool disable_attention = false; // bypass every local bottleneck
};

template <class Real>
TensorPtr<Real> model_forward(const ModelParams<Real>& params, const TensorPtr<Real>& image,
                              RunMode mode, const ForwardOpts& opts = {});

// construction order; learnable parameters plus batch-norm buffers
template <class Real>
std::vector<NamedTensor<Real>> collect_tensors(const ModelParams<Real>& params);

// exact count of learnable scalars (offset tables and running stats excluded)
template <class Real>
std::int64_t param_count(const ModelParams<Real>& params);

template <class Real>
ModelParams<Real> clone_model(const ModelParams<Real>& params);

// Checkpoint file: magic, format version, config digest + serialized config,
// manifest of named shapes, then float32 little-endian blobs.
void save_checkpoint(const ModelParams<float>& params, const std::string& path);
ModelParams<float> load_checkpoint(const std::string& path, const NetworkConfig* expect = nullptr);

} // namespace hba
