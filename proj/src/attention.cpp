#include "hba/attention.hpp"

#include <cmath>

namespace hba {

void HbaConfig::validate() const {
    if (channels < 1) throw ConfigError("hba: channels must be >= 1");
    if (heads < 1) throw ConfigError("hba: heads must be >= 1");
    if (grid < 1) throw ConfigError("hba: attention grid must be >= 1");
    if (channels % heads != 0)
        throw ConfigError("hba: channels " + std::to_string(channels) + " not divisible by heads " +
                          std::to_string(heads));
    if (heads * dv() != channels)
        throw ConfigError("hba: heads*value_dim " + std::to_string(heads * dv()) +
                          " must equal channels " + std::to_string(channels) +
                          " so head outputs concatenate back");
    if (use_channel) {
        if (mlp_reduction < 1 || channels % mlp_reduction != 0)
            throw ConfigError("hba: mlp_reduction " + std::to_string(mlp_reduction) +
                              " must divide channels " + std::to_string(channels));
        if (mlp_hidden() < 1) throw ConfigError("hba: channel MLP hidden width must be >= 1");
    }
    if (key_dim < 0 || value_dim < 0) throw ConfigError("hba: key/value dims must be positive");
}

template <class Real>
std::vector<Real> build_offset_table(int grid, int dk) {
    const int rows = 2 * grid - 1;
    std::vector<Real> t(static_cast<std::size_t>(rows) * dk);
    for (int r = 0; r < rows; ++r) {
        const double offset = r - (grid - 1);
        for (int m = 0; m < dk; ++m) {
            const double expo = static_cast<double>(m - (m % 2)) / dk;
            const double freq = std::pow(10000.0, expo);
            const double v = m % 2 == 0 ? std::sin(offset / freq) : std::cos(offset / freq);
            t[static_cast<std::size_t>(r) * dk + m] = static_cast<Real>(v);
        }
    }
    return t;
}

template <class Real>
HbaParams<Real> build_hba_params(const HbaConfig& cfg, Rng& rng) {
    cfg.validate();
    HbaParams<Real> p;
    p.cfg = cfg;
    const int c = cfg.channels;
    const Real proj_std = static_cast<Real>(std::sqrt(2.0 / c));
    p.wq = randn_tensor<Real>({1, 1, c, cfg.heads * cfg.dk()}, rng, proj_std, true);
    p.wk = randn_tensor<Real>({1, 1, c, cfg.heads * cfg.dk()}, rng, proj_std, true);
    p.wv = randn_tensor<Real>({1, 1, c, cfg.heads * cfg.dv()}, rng, proj_std, true);
    if (cfg.use_channel) {
        const int hidden = cfg.mlp_hidden();
        p.mlp_w1 = randn_tensor<Real>({1, 1, c, hidden}, rng, proj_std, true);
        p.mlp_b1 = make_tensor<Real>({1, 1, 1, hidden}, true);
        p.mlp_w2 = randn_tensor<Real>({1, 1, hidden, c}, rng,
                                      static_cast<Real>(std::sqrt(2.0 / hidden)), true);
        p.mlp_b2 = make_tensor<Real>({1, 1, 1, c}, true);
    }
    if (cfg.use_relative) {
        const int rows = 2 * cfg.grid - 1;
        p.rel_h = tensor_from<Real>({1, 1, rows, cfg.dk()}, build_offset_table<Real>(cfg.grid, cfg.dk()));
        p.rel_w = tensor_from<Real>({1, 1, rows, cfg.dk()}, build_offset_table<Real>(cfg.grid, cfg.dk()));
    }
    return p;
}

std::int64_t hba_param_count(const HbaConfig& cfg) {
    std::int64_t n = static_cast<std::int64_t>(cfg.heads) * cfg.channels * (2 * cfg.dk() + cfg.dv());
    if (cfg.use_channel) {
        const std::int64_t hidden = cfg.mlp_hidden();
        n += 2 * static_cast<std::int64_t>(cfg.channels) * hidden; // two shared layers
        n += hidden + cfg.channels;                                // their biases
    }
    return n;
}

template <class Real>
void hba_collect(const HbaParams<Real>& p, const std::string& prefix,
                 std::vector<std::pair<std::string, TensorPtr<Real>>>& out) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".wv", p.wv);
    if (p.cfg.use_channel) {
        out.emplace_back(prefix + ".mlp_w1", p.mlp_w1);
        out.emplace_back(prefix + ".mlp_b1", p.mlp_b1);
        out.emplace_back(prefix + ".mlp_w2", p.mlp_w2);
        out.emplace_back(prefix + ".mlp_b2", p.mlp_b2);
    }
}

template <class Real>
TensorPtr<Real> project_tokens(const TensorPtr<Real>& f, const TensorPtr<Real>& weight, int heads) {
    return split_heads(dense(nchw_to_tokens(f), weight), heads);
}

template <class Real>
TensorPtr<Real> content_scores(const TensorPtr<Real>& f, const HbaParams<Real>& p) {
    auto q = project_tokens(f, p.wq, p.cfg.heads);
    auto k = project_tokens(f, p.wk, p.cfg.heads);
    auto s = matmul(q, k, true);
    if (p.cfg.use_qk_scaling) s = scale(s, static_cast<Real>(1.0 / std::sqrt(p.cfg.dk())));
    return s;
}

template <class Real>
TensorPtr<Real> relative_scores(const TensorPtr<Real>& q, const HbaParams<Real>& p) {
    if (!p.cfg.use_relative) throw ConfigError("hba: relative attention disabled in this config");
    return rel_pos_scores(q, p.rel_h, p.rel_w, p.cfg.grid);
}

template <class Real>
TensorPtr<Real> channel_scores(const TensorPtr<Real>& f, const HbaParams<Real>& p) {
    if (!p.cfg.use_channel) throw ConfigError("hba: channel attention disabled in this config");
    const Shape s = f->shape;
    auto branch = [&](PoolMode mode) {
        auto pooled = reshape(global_pool2d(f, mode), {s.n, 1, 1, s.c});
        auto hidden = relu(dense(pooled, p.mlp_w1, p.mlp_b1));
        return dense(hidden, p.mlp_w2, p.mlp_b2);
    };
    return add(branch(PoolMode::Avg), branch(PoolMode::Max));
}

template <class Real>
TensorPtr<Real> hba_forward(const TensorPtr<Real>& f, const HbaParams<Real>& p) {
    const Shape s = f->shape;
    if (s.c != p.cfg.channels)
        throw ShapeError("hba_forward: input " + s.str() + " does not carry " +
                         std::to_string(p.cfg.channels) + " channels");
    if (s.h != p.cfg.grid || s.w != p.cfg.grid)
        throw ShapeError("hba_forward: input " + s.str() + " is not on the " +
                         std::to_string(p.cfg.grid) + "x" + std::to_string(p.cfg.grid) +
                         " attention grid");

    auto q = project_tokens(f, p.wq, p.cfg.heads);
    auto k = project_tokens(f, p.wk, p.cfg.heads);
    auto v = project_tokens(f, p.wv, p.cfg.heads);

    auto scores = matmul(q, k, true);
    if (p.cfg.use_qk_scaling) scores = scale(scores, static_cast<Real>(1.0 / std::sqrt(p.cfg.dk())));
    if (p.cfg.use_relative) scores = add(scores, rel_pos_scores(q, p.rel_h, p.rel_w, p.cfg.grid));

    auto weights = softmax(scores, p.cfg.softmax_over_heads ? SoftmaxAxis::Channel : SoftmaxAxis::Width);
    auto out = tokens_to_nchw(merge_heads(matmul(weights, v)), s.h, s.w);

    if (p.cfg.use_channel) {
        auto gate = sigmoid(reshape(channel_scores(f, p), {s.n, s.c, 1, 1}));
        out = scale_channels(out, gate);
    }
    return out;
}

#define HBA_INSTANTIATE_ATTENTION(Real)                                                             \
    template std::vector<Real> build_offset_table<Real>(int, int);                                  \
    template HbaParams<Real> build_hba_params<Real>(const HbaConfig&, Rng&);                         \
    template void hba_collect<Real>(const HbaParams<Real>&, const std::string&,                            \
                                    std::vector<std::pair<std::string, TensorPtr<Real>>>&);          \
    template TensorPtr<Real> project_tokens<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&,    \
                                                  int);                                              \
    template TensorPtr<Real> content_scores<Real>(const TensorPtr<Real>&, const HbaParams<Real>&);   \
    template TensorPtr<Real> relative_scores<Real>(const TensorPtr<Real>&, const HbaParams<Real>&);  \
    template TensorPtr<Real> channel_scores<Real>(const TensorPtr<Real>&, const HbaParams<Real>&);   \
    template TensorPtr<Real> hba_forward<Real>(const TensorPtr<Real>&, const HbaParams<Real>&);

HBA_INSTANTIATE_ATTENTION(float)
HBA_INSTANTIATE_ATTENTION(double)

#undef HBA_INSTANTIATE_ATTENTION

} // namespace hba
