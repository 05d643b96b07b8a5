#pragma once

#include <string>
#include <vector>

#include "hba/ops.hpp"

namespace hba {

// Configuration of one hierarchical bottleneck attention block operating on
// an S x S grid of C-channel tokens.
struct HbaConfig {
    int channels = 0;
    int heads = 4;
    int key_dim = 0;   // 0 -> channels / heads
    int value_dim = 0; // 0 -> channels / heads
    int mlp_reduction = 8;
    int grid = 0; // S
    bool use_qk_scaling = false;    // 1/sqrt(dk) on content scores (off: literal score product)
    bool use_relative = true;       // relative-position branch
    bool use_channel = true;        // pooled-MLP channel gate
    bool softmax_over_heads = false; // normalize scores across heads instead of keys

    int dk() const { return key_dim > 0 ? key_dim : channels / heads; }
    int dv() const { return value_dim > 0 ? value_dim : channels / heads; }
    int mlp_hidden() const { return channels / mlp_reduction; }
    void validate() const;
};

// Learnable projections plus the fixed offset-encoding tables. The tables
// carry no gradient slot and are excluded from parameter counts.
template <class Real>
struct HbaParams {
    HbaConfig cfg;
    TensorPtr<Real> wq, wk, wv;                 // [1,1,C,heads*d]
    TensorPtr<Real> mlp_w1, mlp_b1, mlp_w2, mlp_b2; // shared between pooled branches
    TensorPtr<Real> rel_h, rel_w;               // [1,1,2S-1,dk], fixed
};

// Sinusoidal encoding of the signed integer offset, one dk-dim row per
// offset in [-(S-1), S-1].
template <class Real>
std::vector<Real> build_offset_table(int grid, int dk);

template <class Real>
HbaParams<Real> build_hba_params(const HbaConfig& cfg, Rng& rng);

// learnable scalars of one block (offset tables excluded)
std::int64_t hba_param_count(const HbaConfig& cfg);

template <class Real>
void hba_collect(const HbaParams<Real>& p, const std::string& prefix,
                 std::vector<std::pair<std::string, TensorPtr<Real>>>& out);

// q/k/v token projections: [N,C,S,S] -> [N,heads,S*S,d]
template <class Real>
TensorPtr<Real> project_tokens(const TensorPtr<Real>& f, const TensorPtr<Real>& weight, int heads);

// content attention scores q.k^T, [N,heads,S*S,S*S]
template <class Real>
TensorPtr<Real> content_scores(const TensorPtr<Real>& f, const HbaParams<Real>& p);

// relative-position scores for projected queries q
template <class Real>
TensorPtr<Real> relative_scores(const TensorPtr<Real>& q, const HbaParams<Real>& p);

// channel attention scores MLP(AvgPool(F)) + MLP(MaxPool(F)), shape [N,1,1,C]
// (the sigmoid is applied by hba_forward)
template <class Real>
TensorPtr<Real> channel_scores(const TensorPtr<Real>& f, const HbaParams<Real>& p);

// full block: softmax(F_S + F_R) applied to v, heads concatenated, channels
// gated by sigmoid(F_C); output shape equals the input shape
template <class Real>
TensorPtr<Real> hba_forward(const TensorPtr<Real>& f, const HbaParams<Real>& p);

} // namespace hba
