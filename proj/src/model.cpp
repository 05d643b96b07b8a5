#include "hba/model.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "hba/serialize.hpp"

namespace hba {

namespace {
constexpr char kCheckpointMagic[8] = {'H', 'B', 'A', 'U', 'N', 'E', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr float kBnMomentum = 0.1f;
constexpr float kBnEps = 1e-5f;
} // namespace

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Unet: return "unet";
        case Variant::UnetResnet: return "unet+resnet";
        case Variant::SelfAtt: return "unet+resnet+selfatt";
        case Variant::Hba1: return "hba1";
        case Variant::HbaAll: return "hba-all";
    }
    return "?";
}

Variant parse_variant(const std::string& name) {
    for (Variant v : kVariantLadder)
        if (name == variant_name(v)) return v;
    if (name == "selfatt") return Variant::SelfAtt; // short form
    throw ConfigError("unknown variant '" + name +
                      "' (expected unet, unet+resnet, unet+resnet+selfatt, hba1, hba-all)");
}

int NetworkConfig::width(int level) const {
    int w = base_channels;
    for (int i = 0; i < level; ++i) w *= channel_mult;
    return w;
}

HbaConfig NetworkConfig::attn_config(int site_channels) const {
    HbaConfig c;
    c.channels = site_channels;
    c.heads = heads;
    c.key_dim = attn_key_dim;
    c.value_dim = attn_value_dim;
    c.mlp_reduction = mlp_reduction;
    c.grid = attn_grid;
    c.use_qk_scaling = qk_scaling;
    c.softmax_over_heads = softmax_over_heads;
    if (variant == Variant::SelfAtt) {
        c.use_relative = false;
        c.use_channel = false;
    }
    return c;
}

void NetworkConfig::validate() const {
    if (levels < 1) throw ConfigError("model: levels must be >= 1");
    if (base_channels < 1 || channel_mult < 1 || blocks_per_level < 1)
        throw ConfigError("model: channel widths and block depth must be >= 1");
    if (out_classes < 1) throw ConfigError("model: out_classes must be >= 1");
    if (input_size < 1) throw ConfigError("model: input_size must be >= 1");
    if (attn_grid < 1) throw ConfigError("model: attn_grid must be >= 1");

    const int pow2 = 1 << levels;
    const int bottom_side = input_size / pow2;
    if (input_size % pow2 != 0 || bottom_side < 1 || bottom_side % attn_grid != 0) {
        std::string msg = "model: input_size " + std::to_string(input_size) +
                          " is not divisible down to the attention grid; valid sizes are multiples of " +
                          std::to_string(attn_grid * pow2) + " (e.g.";
        for (int k = 1; k <= 3; ++k) msg += " " + std::to_string(k * attn_grid * pow2);
        throw ConfigError(msg + ")");
    }
    if (attn_at_bottom()) attn_config(bottom_width()).validate();
    if (attn_at_skips())
        for (int l = 0; l < levels; ++l) attn_config(width(l)).validate();
}

std::string NetworkConfig::serialize() const {
    std::ostringstream os;
    os << "levels=" << levels << "\n"
       << "base_channels=" << base_channels << "\n"
       << "stem_channels=" << stem_channels << "\n"
       << "channel_mult=" << channel_mult << "\n"
       << "blocks_per_level=" << blocks_per_level << "\n"
       << "attn_grid=" << attn_grid << "\n"
       << "variant=" << variant_name(variant) << "\n"
       << "input_size=" << input_size << "\n"
       << "out_classes=" << out_classes << "\n"
       << "concat_input=" << (concat_input ? 1 : 0) << "\n"
       << "heads=" << heads << "\n"
       << "attn_key_dim=" << attn_key_dim << "\n"
       << "attn_value_dim=" << attn_value_dim << "\n"
       << "mlp_reduction=" << mlp_reduction << "\n"
       << "qk_scaling=" << (qk_scaling ? 1 : 0) << "\n"
       << "softmax_over_heads=" << (softmax_over_heads ? 1 : 0) << "\n";
    return os.str();
}

NetworkConfig NetworkConfig::deserialize(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("model config: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto geti = [&](const char* key, int def) {
        auto it = kv.find(key);
        return it == kv.end() ? def : std::stoi(it->second);
    };
    NetworkConfig c;
    c.levels = geti("levels", c.levels);
    c.base_channels = geti("base_channels", c.base_channels);
    c.stem_channels = geti("stem_channels", c.stem_channels);
    c.channel_mult = geti("channel_mult", c.channel_mult);
    c.blocks_per_level = geti("blocks_per_level", c.blocks_per_level);
    c.attn_grid = geti("attn_grid", c.attn_grid);
    if (kv.count("variant")) c.variant = parse_variant(kv["variant"]);
    c.input_size = geti("input_size", c.input_size);
    c.out_classes = geti("out_classes", c.out_classes);
    c.concat_input = geti("concat_input", c.concat_input ? 1 : 0) != 0;
    c.heads = geti("heads", c.heads);
    c.attn_key_dim = geti("attn_key_dim", c.attn_key_dim);
    c.attn_value_dim = geti("attn_value_dim", c.attn_value_dim);
    c.mlp_reduction = geti("mlp_reduction", c.mlp_reduction);
    c.qk_scaling = geti("qk_scaling", 0) != 0;
    c.softmax_over_heads = geti("softmax_over_heads", 0) != 0;
    return c;
}

std::uint64_t NetworkConfig::digest() const {
    return fnv1a(serialize());
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

namespace {

template <class Real>
ConvBn<Real> make_conv_bn(Rng& rng, int cout, int cin, int k) {
    ConvBn<Real> cb;
    const Real std = static_cast<Real>(std::sqrt(2.0 / (static_cast<double>(cin) * k * k)));
    cb.w = randn_tensor<Real>({cout, cin, k, k}, rng, std, true);
    cb.gamma = full_tensor<Real>({1, cout, 1, 1}, Real(1), true);
    cb.beta = make_tensor<Real>({1, cout, 1, 1}, true);
    cb.run_mean = make_tensor<Real>({1, cout, 1, 1});
    cb.run_var = full_tensor<Real>({1, cout, 1, 1}, Real(1));
    return cb;
}

template <class Real>
BlockParams<Real> make_block(Rng& rng, int cin, int cout, bool residual) {
    BlockParams<Real> b;
    b.residual = residual;
    b.c1 = make_conv_bn<Real>(rng, cout, cin, 3);
    b.c2 = make_conv_bn<Real>(rng, cout, cout, 3);
    if (residual && cin != cout) b.shortcut = make_conv_bn<Real>(rng, cout, cin, 1);
    return b;
}

template <class Real>
TensorPtr<Real> bn_apply(const ConvBn<Real>& cb, const TensorPtr<Real>& x, RunMode mode,
                         const ForwardOpts& opts) {
    return batchnorm2d(x, cb.gamma, cb.beta, cb.run_mean, cb.run_var, mode == RunMode::Train,
                       static_cast<Real>(kBnMomentum), static_cast<Real>(kBnEps),
                       mode == RunMode::Train && opts.update_running);
}

template <class Real>
TensorPtr<Real> conv_bn_relu(const ConvBn<Real>& cb, const TensorPtr<Real>& x, int pad, RunMode mode,
                             const ForwardOpts& opts) {
    return relu(bn_apply(cb, conv2d(x, cb.w, 1, pad), mode, opts));
}

template <class Real>
TensorPtr<Real> block_forward(const BlockParams<Real>& b, const TensorPtr<Real>& x, RunMode mode,
                              const ForwardOpts& opts) {
    auto h = conv_bn_relu(b.c1, x, 1, mode, opts);
    h = bn_apply(b.c2, conv2d(h, b.c2.w, 1, 1), mode, opts);
    if (b.residual) {
        auto s = x;
        if (b.shortcut) s = bn_apply(*b.shortcut, conv2d(x, b.shortcut->w, 1, 0), mode, opts);
        h = add(h, s);
    }
    return relu(h);
}

// local bottleneck: pool to the attention grid, attend, upsample, residual add
template <class Real>
TensorPtr<Real> attn_bottleneck(const TensorPtr<Real>& z, const HbaParams<Real>& p) {
    const int side = z->shape.h;
    const int rate = side / p.cfg.grid;
    auto pooled = rate > 1 ? pool2d(z, PoolMode::Avg, rate, rate) : z;
    auto attended = hba_forward(pooled, p);
    auto up = rate > 1 ? resample(attended, side, side, ResampleMode::Bilinear) : attended;
    return add(z, up);
}

template <class Real>
void collect_conv_bn(const ConvBn<Real>& cb, const std::string& prefix,
                     std::vector<NamedTensor<Real>>& out) {
    out.push_back({prefix + ".w", cb.w, true});
    out.push_back({prefix + ".gamma", cb.gamma, true});
    out.push_back({prefix + ".beta", cb.beta, true});
    out.push_back({prefix + ".run_mean", cb.run_mean, false});
    out.push_back({prefix + ".run_var", cb.run_var, false});
}

template <class Real>
void collect_block(const BlockParams<Real>& b, const std::string& prefix,
                   std::vector<NamedTensor<Real>>& out) {
    collect_conv_bn(b.c1, prefix + ".c1", out);
    collect_conv_bn(b.c2, prefix + ".c2", out);
    if (b.shortcut) collect_conv_bn(*b.shortcut, prefix + ".shortcut", out);
}

template <class Real>
void collect_attn(const HbaParams<Real>& p, const std::string& prefix,
                  std::vector<NamedTensor<Real>>& out) {
    std::vector<std::pair<std::string, TensorPtr<Real>>> named;
    hba_collect(p, prefix, named);
    for (auto& [name, t] : named) out.push_back({name, t, true});
}

} // namespace

template <class Real>
ModelParams<Real> build_model(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive(seed, {0x6d6f64656cULL}).next_u64()); // "model" stream

    ModelParams<Real> p;
    p.cfg = cfg;
    p.stem = make_conv_bn<Real>(rng, cfg.stem(), 3, 3);

    int prev = cfg.stem();
    p.enc.resize(static_cast<std::size_t>(cfg.levels));
    for (int l = 0; l < cfg.levels; ++l) {
        for (int b = 0; b < cfg.blocks_per_level; ++b) {
            p.enc[static_cast<std::size_t>(l)].push_back(
                make_block<Real>(rng, b == 0 ? prev : cfg.width(l), cfg.width(l), cfg.residual_encoder()));
        }
        prev = cfg.width(l);
    }
    for (int b = 0; b < cfg.blocks_per_level; ++b) {
        p.bottom.push_back(make_block<Real>(rng, b == 0 ? prev : cfg.bottom_width(), cfg.bottom_width(),
                                            cfg.residual_encoder()));
    }
    if (cfg.attn_at_bottom())
        p.bottom_attn = build_hba_params<Real>(cfg.attn_config(cfg.bottom_width()), rng);
    p.skip_attn.resize(static_cast<std::size_t>(cfg.levels));
    if (cfg.attn_at_skips())
        for (int l = 0; l < cfg.levels; ++l)
            p.skip_attn[static_cast<std::size_t>(l)] = build_hba_params<Real>(cfg.attn_config(cfg.width(l)), rng);

    p.dec.resize(static_cast<std::size_t>(cfg.levels));
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const int deeper = l == cfg.levels - 1 ? cfg.bottom_width() : cfg.width(l + 1);
        DecoderLevel<Real> d;
        d.up = make_conv_bn<Real>(rng, cfg.width(l), deeper, 3);
        d.fuse = make_block<Real>(rng, 2 * cfg.width(l), cfg.width(l), false);
        p.dec[static_cast<std::size_t>(l)] = std::move(d);
    }

    const int head_in = cfg.width(0) + (cfg.concat_input ? 3 : 0);
    const Real head_std = static_cast<Real>(std::sqrt(2.0 / head_in));
    p.head_w = randn_tensor<Real>({cfg.out_classes, head_in, 1, 1}, rng, head_std, true);
    p.head_b = make_tensor<Real>({1, cfg.out_classes, 1, 1}, true);
    return p;
}

template <class Real>
TensorPtr<Real> model_forward(const ModelParams<Real>& p, const TensorPtr<Real>& image, RunMode mode,
                              const ForwardOpts& opts) {
    const NetworkConfig& cfg = p.cfg;
    const Shape in = image->shape;
    if (in.c != 3 || in.h != cfg.input_size || in.w != cfg.input_size)
        throw ShapeError("model_forward: input " + in.str() + " does not match configured " +
                         std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) +
                         " RGB input");

    auto z = conv_bn_relu(p.stem, image, 1, mode, opts);
    std::vector<TensorPtr<Real>> skips;
    for (int l = 0; l < cfg.levels; ++l) {
        for (const auto& b : p.enc[static_cast<std::size_t>(l)]) z = block_forward(b, z, mode, opts);
        skips.push_back(z);
        z = pool2d(z, PoolMode::Max, 2, 2);
    }
    for (const auto& b : p.bottom) z = block_forward(b, z, mode, opts);
    if (p.bottom_attn && !opts.disable_attention) z = attn_bottleneck(z, *p.bottom_attn);

    auto d = z;
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const auto& dl = p.dec[static_cast<std::size_t>(l)];
        d = resample(d, cfg.side(l), cfg.side(l), ResampleMode::Bilinear);
        d = conv_bn_relu(dl.up, d, 1, mode, opts);
        auto s = skips[static_cast<std::size_t>(l)];
        if (p.skip_attn[static_cast<std::size_t>(l)] && !opts.disable_attention)
            s = attn_bottleneck(s, *p.skip_attn[static_cast<std::size_t>(l)]);
        d = block_forward(dl.fuse, concat_channels(d, s), mode, opts);
    }

    if (cfg.concat_input) d = concat_channels(d, image);
    return conv2d(d, p.head_w, 1, 0, p.head_b);
}

template <class Real>
std::vector<NamedTensor<Real>> collect_tensors(const ModelParams<Real>& p) {
    std::vector<NamedTensor<Real>> out;
    collect_conv_bn(p.stem, "stem", out);
    for (int l = 0; l < p.cfg.levels; ++l)
        for (std::size_t b = 0; b < p.enc[static_cast<std::size_t>(l)].size(); ++b)
            collect_block(p.enc[static_cast<std::size_t>(l)][b],
                          "enc" + std::to_string(l) + ".b" + std::to_string(b), out);
    for (std::size_t b = 0; b < p.bottom.size(); ++b)
        collect_block(p.bottom[b], "bottom.b" + std::to_string(b), out);
    if (p.bottom_attn) collect_attn(*p.bottom_attn, "attn.bottom", out);
    for (int l = 0; l < p.cfg.levels; ++l)
        if (p.skip_attn[static_cast<std::size_t>(l)])
            collect_attn(*p.skip_attn[static_cast<std::size_t>(l)], "attn.skip" + std::to_string(l), out);
    for (int l = p.cfg.levels - 1; l >= 0; --l) {
        collect_conv_bn(p.dec[static_cast<std::size_t>(l)].up, "dec" + std::to_string(l) + ".up", out);
        collect_block(p.dec[static_cast<std::size_t>(l)].fuse, "dec" + std::to_string(l) + ".fuse", out);
    }
    out.push_back({"head.w", p.head_w, true});
    out.push_back({"head.b", p.head_b, true});
    return out;
}

template <class Real>
std::int64_t param_count(const ModelParams<Real>& p) {
    std::int64_t n = 0;
    for (const auto& nt : collect_tensors(p))
        if (nt.learnable) n += nt.tensor->numel();
    return n;
}

template <class Real>
ModelParams<Real> clone_model(const ModelParams<Real>& p) {
    ModelParams<Real> copy = build_model<Real>(p.cfg, 0);
    auto src = collect_tensors(p);
    auto dst = collect_tensors(copy);
    if (src.size() != dst.size()) throw Error("clone_model: tensor inventory mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor->data = src[i].tensor->data;
    return copy;
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    bio::put_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
    bio::put<std::uint32_t>(os, kCheckpointVersion);
    const std::string cfg_text = params.cfg.serialize();
    bio::put<std::uint64_t>(os, fnv1a(cfg_text));
    bio::put_string(os, cfg_text);

    auto tensors = collect_tensors(params);
    bio::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        bio::put<std::uint16_t>(os, static_cast<std::uint16_t>(nt.name.size()));
        bio::put_bytes(os, nt.name.data(), nt.name.size());
        bio::put<std::uint8_t>(os, nt.learnable ? 0 : 1);
        const Shape s = nt.tensor->shape;
        bio::put<std::int32_t>(os, s.n);
        bio::put<std::int32_t>(os, s.c);
        bio::put<std::int32_t>(os, s.h);
        bio::put<std::int32_t>(os, s.w);
    }
    for (const auto& nt : tensors) bio::put_f32_array(os, nt.tensor->data.data(), nt.tensor->data.size());
    if (!os) throw IoError("write failed for checkpoint: " + path);
}

ModelParams<float> load_checkpoint(const std::string& path, const NetworkConfig* expect) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    bio::get_bytes(is, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw IoError("not a checkpoint file: " + path);
    const auto version = bio::get<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    const auto digest = bio::get<std::uint64_t>(is, "config digest");
    const std::string cfg_text = bio::get_string(is, "config");
    if (fnv1a(cfg_text) != digest) throw IoError("checkpoint config digest mismatch (corrupt file?)");
    const NetworkConfig cfg = NetworkConfig::deserialize(cfg_text);
    if (expect && expect->digest() != cfg.digest())
        throw ConfigError("checkpoint was written under a different model config:\n--- checkpoint\n" +
                          cfg_text + "--- expected\n" + expect->serialize());

    ModelParams<float> params = build_model<float>(cfg, 0);
    auto tensors = collect_tensors(params);
    const auto n_entries = bio::get<std::uint32_t>(is, "entry count");
    if (n_entries != tensors.size())
        throw IoError("checkpoint manifest holds " + std::to_string(n_entries) + " tensors, model needs " +
                      std::to_string(tensors.size()));
    for (auto& nt : tensors) {
        const auto name_len = bio::get<std::uint16_t>(is, "name length");
        std::string name(name_len, '\0');
        bio::get_bytes(is, name.data(), name_len, "tensor name");
        const auto kind = bio::get<std::uint8_t>(is, "tensor kind");
        Shape s;
        s.n = bio::get<std::int32_t>(is, "shape");
        s.c = bio::get<std::int32_t>(is, "shape");
        s.h = bio::get<std::int32_t>(is, "shape");
        s.w = bio::get<std::int32_t>(is, "shape");
        if (name != nt.name || s != nt.tensor->shape || (kind == 0) != nt.learnable)
            throw IoError("checkpoint manifest entry '" + name + "' does not match model tensor '" +
                          nt.name + "' " + nt.tensor->shape.str());
    }
    for (auto& nt : tensors)
        bio::get_f32_array(is, nt.tensor->data.data(), nt.tensor->data.size(), nt.name.c_str());
    return params;
}

#define HBA_INSTANTIATE_MODEL(Real)                                                                  \
    template ModelParams<Real> build_model<Real>(const NetworkConfig&, std::uint64_t);               \
    template TensorPtr<Real> model_forward<Real>(const ModelParams<Real>&, const TensorPtr<Real>&,   \
                                                 RunMode, const ForwardOpts&);                        \
    template std::vector<NamedTensor<Real>> collect_tensors<Real>(const ModelParams<Real>&);          \
    template std::int64_t param_count<Real>(const ModelParams<Real>&);                                \
    template ModelParams<Real> clone_model<Real>(const ModelParams<Real>&);

HBA_INSTANTIATE_MODEL(float)
HBA_INSTANTIATE_MODEL(double)

#undef HBA_INSTANTIATE_MODEL

} // namespace hba
