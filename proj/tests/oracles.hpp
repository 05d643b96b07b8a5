#pragma once

// Brute-force reference implementations used by the test suites. These are
// deliberately written as plain nested loops over raw arrays, independent of
// the tensor-engine code paths they check.

#include <cmath>
#include <vector>

#include "hba/attention.hpp"

namespace oracles {

// Full HBA block with explicit sums over heads, tokens and channels.
// Reads only the raw parameter arrays.
inline std::vector<float> naive_hba_forward(const std::vector<float>& f, int n_batch,
                                            const hba::HbaParams<float>& p) {
    const auto& cfg = p.cfg;
    const int c_all = cfg.channels, s = cfg.grid, heads = cfg.heads;
    const int dk = cfg.dk(), dv = cfg.dv();
    const int t = s * s;
    std::vector<float> out(static_cast<std::size_t>(n_batch) * c_all * t, 0.f);

    auto f_at = [&](int n, int c, int tok) {
        return static_cast<double>(f[(static_cast<std::size_t>(n) * c_all + c) * t + tok]);
    };
    auto wq = [&](int c, int h, int m) {
        return static_cast<double>(p.wq->data[static_cast<std::size_t>(c) * heads * dk + h * dk + m]);
    };
    auto wk = [&](int c, int h, int m) {
        return static_cast<double>(p.wk->data[static_cast<std::size_t>(c) * heads * dk + h * dk + m]);
    };
    auto wv = [&](int c, int h, int m) {
        return static_cast<double>(p.wv->data[static_cast<std::size_t>(c) * heads * dv + h * dv + m]);
    };

    for (int n = 0; n < n_batch; ++n) {
        // projections per head
        std::vector<double> q(static_cast<std::size_t>(heads) * t * dk);
        std::vector<double> k(static_cast<std::size_t>(heads) * t * dk);
        std::vector<double> v(static_cast<std::size_t>(heads) * t * dv);
        for (int h = 0; h < heads; ++h)
            for (int tok = 0; tok < t; ++tok) {
                for (int m = 0; m < dk; ++m) {
                    double aq = 0, ak = 0;
                    for (int c = 0; c < c_all; ++c) {
                        aq += f_at(n, c, tok) * wq(c, h, m);
                        ak += f_at(n, c, tok) * wk(c, h, m);
                    }
                    q[(static_cast<std::size_t>(h) * t + tok) * dk + m] = aq;
                    k[(static_cast<std::size_t>(h) * t + tok) * dk + m] = ak;
                }
                for (int m = 0; m < dv; ++m) {
                    double av = 0;
                    for (int c = 0; c < c_all; ++c) av += f_at(n, c, tok) * wv(c, h, m);
                    v[(static_cast<std::size_t>(h) * t + tok) * dv + m] = av;
                }
            }

        // scores: content plus relative position
        std::vector<double> scores(static_cast<std::size_t>(heads) * t * t);
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < t; ++j) {
                    double acc = 0;
                    for (int m = 0; m < dk; ++m)
                        acc += q[(static_cast<std::size_t>(h) * t + i) * dk + m] *
                               k[(static_cast<std::size_t>(h) * t + j) * dk + m];
                    if (cfg.use_qk_scaling) acc /= std::sqrt(static_cast<double>(dk));
                    if (cfg.use_relative) {
                        const int dy = (j / s) - (i / s) + s - 1;
                        const int dx = (j % s) - (i % s) + s - 1;
                        for (int m = 0; m < dk; ++m)
                            acc += q[(static_cast<std::size_t>(h) * t + i) * dk + m] *
                                   (static_cast<double>(p.rel_h->data[static_cast<std::size_t>(dy) * dk + m]) +
                                    static_cast<double>(p.rel_w->data[static_cast<std::size_t>(dx) * dk + m]));
                    }
                    scores[(static_cast<std::size_t>(h) * t + i) * t + j] = acc;
                }

        // softmax over keys (or across heads when configured)
        std::vector<double> attn(scores.size());
        if (!cfg.softmax_over_heads) {
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < t; ++i) {
                    double mx = scores[(static_cast<std::size_t>(h) * t + i) * t];
                    for (int j = 1; j < t; ++j)
                        mx = std::max(mx, scores[(static_cast<std::size_t>(h) * t + i) * t + j]);
                    double sum = 0;
                    for (int j = 0; j < t; ++j)
                        sum += std::exp(scores[(static_cast<std::size_t>(h) * t + i) * t + j] - mx);
                    for (int j = 0; j < t; ++j)
                        attn[(static_cast<std::size_t>(h) * t + i) * t + j] =
                            std::exp(scores[(static_cast<std::size_t>(h) * t + i) * t + j] - mx) / sum;
                }
        } else {
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < t; ++j) {
                    double mx = scores[(static_cast<std::size_t>(0) * t + i) * t + j];
                    for (int h = 1; h < heads; ++h)
                        mx = std::max(mx, scores[(static_cast<std::size_t>(h) * t + i) * t + j]);
                    double sum = 0;
                    for (int h = 0; h < heads; ++h)
                        sum += std::exp(scores[(static_cast<std::size_t>(h) * t + i) * t + j] - mx);
                    for (int h = 0; h < heads; ++h)
                        attn[(static_cast<std::size_t>(h) * t + i) * t + j] =
                            std::exp(scores[(static_cast<std::size_t>(h) * t + i) * t + j] - mx) / sum;
                }
        }

        // channel gate from the pooled shared MLP
        std::vector<double> gate(static_cast<std::size_t>(c_all), 1.0);
        if (cfg.use_channel) {
            const int hidden = cfg.mlp_hidden();
            std::vector<double> fc(static_cast<std::size_t>(c_all), 0.0);
            for (int branch = 0; branch < 2; ++branch) {
                std::vector<double> pooled(static_cast<std::size_t>(c_all));
                for (int c = 0; c < c_all; ++c) {
                    if (branch == 0) {
                        double acc = 0;
                        for (int tok = 0; tok < t; ++tok) acc += f_at(n, c, tok);
                        pooled[static_cast<std::size_t>(c)] = acc / t;
                    } else {
                        double mx = f_at(n, c, 0);
                        for (int tok = 1; tok < t; ++tok) mx = std::max(mx, f_at(n, c, tok));
                        pooled[static_cast<std::size_t>(c)] = mx;
                    }
                }
                std::vector<double> h1(static_cast<std::size_t>(hidden));
                for (int j = 0; j < hidden; ++j) {
                    double acc = static_cast<double>(p.mlp_b1->data[static_cast<std::size_t>(j)]);
                    for (int c = 0; c < c_all; ++c)
                        acc += pooled[static_cast<std::size_t>(c)] *
                               static_cast<double>(p.mlp_w1->data[static_cast<std::size_t>(c) * hidden + j]);
                    h1[static_cast<std::size_t>(j)] = acc > 0 ? acc : 0;
                }
                for (int c = 0; c < c_all; ++c) {
                    double acc = static_cast<double>(p.mlp_b2->data[static_cast<std::size_t>(c)]);
                    for (int j = 0; j < hidden; ++j)
                        acc += h1[static_cast<std::size_t>(j)] *
                               static_cast<double>(p.mlp_w2->data[static_cast<std::size_t>(j) * c_all + c]);
                    fc[static_cast<std::size_t>(c)] += acc;
                }
            }
            for (int c = 0; c < c_all; ++c)
                gate[static_cast<std::size_t>(c)] = 1.0 / (1.0 + std::exp(-fc[static_cast<std::size_t>(c)]));
        }

        // weighted values, concatenated heads, gated channels
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < t; ++i)
                for (int m = 0; m < dv; ++m) {
                    double acc = 0;
                    for (int j = 0; j < t; ++j)
                        acc += attn[(static_cast<std::size_t>(h) * t + i) * t + j] *
                               v[(static_cast<std::size_t>(h) * t + j) * dv + m];
                    const int c = h * dv + m;
                    out[(static_cast<std::size_t>(n) * c_all + c) * t + i] =
                        static_cast<float>(acc * gate[static_cast<std::size_t>(c)]);
                }
    }
    return out;
}

} // namespace oracles
