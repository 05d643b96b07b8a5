// HBA block tests: each scoring branch against loop oracles, the fused block
// against the all-loops reference, and finite-difference gradient checks.

#include <algorithm>
#include <cstring>

#include "hba/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace hba;
using namespace testutil;

namespace {

HbaConfig small_cfg(int channels, int grid, int heads, bool relative = true, bool channel = true) {
    HbaConfig cfg;
    cfg.channels = channels;
    cfg.heads = heads;
    cfg.grid = grid;
    cfg.mlp_reduction = channels >= 2 ? 2 : 1;
    cfg.use_relative = relative;
    cfg.use_channel = channel;
    return cfg;
}

void zero(TensorPtr<float>& t) {
    std::fill(t->data.begin(), t->data.end(), 0.f);
}

void test_content_scores() {
    section("content scores");

    { // zero query projection kills every score
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(1);
        auto p = build_hba_params<float>(cfg, rng);
        zero(p.wq);
        auto f = randn_tensor<float>({1, 4, 2, 2}, rng);
        auto fs = content_scores(f, p);
        bool ok = fs->shape == Shape{1, 2, 4, 4};
        for (float v : fs->data) ok = ok && v == 0.f;
        check(ok, "W_Q = 0 makes F_S identically zero");
    }

    { // 2x2 grid, one head, against the per-pair dot-product loop
        auto cfg = small_cfg(3, 2, 1);
        cfg.mlp_reduction = 3;
        Rng rng(2);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({1, 3, 2, 2}, rng);
        auto fs = content_scores(f, p);
        double worst = 0;
        const int dk = cfg.dk();
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double want = 0;
                for (int m = 0; m < dk; ++m) {
                    double qi = 0, kj = 0;
                    for (int c = 0; c < 3; ++c) {
                        qi += f->at(0, c, i / 2, i % 2) * p.wq->data[static_cast<std::size_t>(c) * dk + m];
                        kj += f->at(0, c, j / 2, j % 2) * p.wk->data[static_cast<std::size_t>(c) * dk + m];
                    }
                    want += qi * kj;
                }
                worst = std::max(worst, std::abs(static_cast<double>(fs->at(0, 0, i, j)) - want));
            }
        check_le(worst, 1e-6, "scores equal the nested-loop dot-product oracle");
    }

    { // permuting token order permutes rows and columns identically
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(3);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({1, 4, 2, 2}, rng);
        const int perm[4] = {2, 0, 3, 1};
        auto f2 = make_tensor<float>(f->shape);
        for (int c = 0; c < 4; ++c)
            for (int t = 0; t < 4; ++t)
                f2->at(0, c, t / 2, t % 2) = f->at(0, c, perm[t] / 2, perm[t] % 2);
        auto fs = content_scores(f, p);
        auto fs2 = content_scores(f2, p);
        double worst = 0;
        for (int h = 0; h < 2; ++h)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    worst = std::max(worst, std::abs(static_cast<double>(fs2->at(0, h, i, j)) -
                                                     fs->at(0, h, perm[i], perm[j])));
        check_le(worst, 1e-6, "token permutation permutes F_S rows and columns");
    }

    check_throws([] {
        auto cfg = small_cfg(5, 2, 2);
        cfg.mlp_reduction = 5;
        cfg.validate();
    }, "channels not divisible by heads is a config error");
}

void test_relative_scores() {
    section("relative-position scores");

    auto cfg = small_cfg(4, 3, 2);
    Rng rng(5);
    auto p = build_hba_params<float>(cfg, rng);
    const int s = 3, t = 9, dk = cfg.dk();

    { // zero query -> zero scores (linear in q)
        auto q = make_tensor<float>({1, 2, t, dk});
        auto fr = relative_scores(q, p);
        bool ok = true;
        for (float v : fr->data) ok = ok && v == 0.f;
        check(ok, "q = 0 makes F_R identically zero");
    }

    auto q = randn_tensor<float>({2, 2, t, dk}, rng);
    auto fr = relative_scores(q, p);

    { // diagonal: zero offset on both axes
        double worst = 0;
        for (int n = 0; n < 2; ++n)
            for (int h = 0; h < 2; ++h)
                for (int i = 0; i < t; ++i) {
                    double want = 0;
                    for (int m = 0; m < dk; ++m)
                        want += static_cast<double>(q->at(n, h, i, m)) *
                                (p.rel_h->data[static_cast<std::size_t>(s - 1) * dk + m] +
                                 p.rel_w->data[static_cast<std::size_t>(s - 1) * dk + m]);
                    worst = std::max(worst, std::abs(static_cast<double>(fr->at(n, h, i, i)) - want));
                }
        check_le(worst, 1e-6, "diagonal equals q_i . (e(0) + e(0))");
    }

    { // full brute force over all (i, j) offset pairs
        double worst = 0;
        for (int n = 0; n < 2; ++n)
            for (int h = 0; h < 2; ++h)
                for (int i = 0; i < t; ++i)
                    for (int j = 0; j < t; ++j) {
                        const int dy = (j / s) - (i / s) + s - 1;
                        const int dx = (j % s) - (i % s) + s - 1;
                        double want = 0;
                        for (int m = 0; m < dk; ++m)
                            want += static_cast<double>(q->at(n, h, i, m)) *
                                    (p.rel_h->data[static_cast<std::size_t>(dy) * dk + m] +
                                     p.rel_w->data[static_cast<std::size_t>(dx) * dk + m]);
                        worst = std::max(worst, std::abs(static_cast<double>(fr->at(n, h, i, j)) - want));
                    }
        check_le(worst, 1e-6, "3x3 grid matches the brute-force offset loop");
    }

    { // tables carry no gradient slot
        check(!p.rel_h->requires_grad && !p.rel_w->requires_grad,
              "offset tables are built without gradient slots");
        auto qg = randn_tensor<float>({1, 2, t, dk}, rng, 1.f, true);
        Tape<float> tape;
        {
            TapeScope<float> scope(tape);
            tape.backward(reduce_sum(relative_scores(qg, p)));
        }
        check(p.rel_h->grad.empty() && p.rel_w->grad.empty() && !qg->grad.empty(),
              "backward fills q's gradient but never the tables");
    }
}

void test_channel_scores() {
    section("channel scores");

    { // constant field: avg == max, so F_C = 2 MLP(c 1)
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(7);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = full_tensor<float>({1, 4, 2, 2}, 0.7f);
        auto fc = channel_scores(f, p);
        const int hidden = cfg.mlp_hidden();
        double worst = 0;
        for (int c = 0; c < 4; ++c) {
            double acc = p.mlp_b2->data[static_cast<std::size_t>(c)];
            for (int j = 0; j < hidden; ++j) {
                double h1 = p.mlp_b1->data[static_cast<std::size_t>(j)];
                for (int ci = 0; ci < 4; ++ci)
                    h1 += 0.7 * p.mlp_w1->data[static_cast<std::size_t>(ci) * hidden + j];
                h1 = h1 > 0 ? h1 : 0;
                acc += h1 * p.mlp_w2->data[static_cast<std::size_t>(j) * 4 + c];
            }
            worst = std::max(worst, std::abs(static_cast<double>(fc->at(0, 0, 0, c)) - 2.0 * acc));
        }
        check_le(worst, 1e-6, "constant field gives F_C = 2 MLP(c 1)");
    }

    { // zero MLP -> F_C = 0 -> gate 0.5
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(8);
        auto p = build_hba_params<float>(cfg, rng);
        zero(p.mlp_w1);
        zero(p.mlp_w2);
        auto f = randn_tensor<float>({2, 4, 2, 2}, rng);
        auto fc = channel_scores(f, p);
        bool ok = true;
        for (float v : fc->data) ok = ok && v == 0.f;
        auto gate = sigmoid(fc);
        for (float v : gate->data) ok = ok && std::abs(v - 0.5f) < 1e-7f;
        check(ok, "zero MLP gives F_C = 0 and sigma(F_C) = 0.5 per channel");
    }

    { // random 1x4x2x2 against the hand-rolled pool + affine oracle
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(9);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({1, 4, 2, 2}, rng);
        auto fc = channel_scores(f, p);
        const int hidden = cfg.mlp_hidden();
        double worst = 0;
        for (int c = 0; c < 4; ++c) {
            double want = 0;
            for (int branch = 0; branch < 2; ++branch) {
                double pooled[4];
                for (int ci = 0; ci < 4; ++ci) {
                    if (branch == 0) {
                        double acc = 0;
                        for (int t = 0; t < 4; ++t) acc += f->at(0, ci, t / 2, t % 2);
                        pooled[ci] = acc / 4.0;
                    } else {
                        double mx = f->at(0, ci, 0, 0);
                        for (int t = 1; t < 4; ++t) mx = std::max(mx, static_cast<double>(f->at(0, ci, t / 2, t % 2)));
                        pooled[ci] = mx;
                    }
                }
                double acc = p.mlp_b2->data[static_cast<std::size_t>(c)];
                for (int j = 0; j < hidden; ++j) {
                    double h1 = p.mlp_b1->data[static_cast<std::size_t>(j)];
                    for (int ci = 0; ci < 4; ++ci)
                        h1 += pooled[ci] * p.mlp_w1->data[static_cast<std::size_t>(ci) * hidden + j];
                    h1 = h1 > 0 ? h1 : 0;
                    acc += h1 * p.mlp_w2->data[static_cast<std::size_t>(j) * 4 + c];
                }
                want += acc;
            }
            worst = std::max(worst, std::abs(static_cast<double>(fc->at(0, 0, 0, c)) - want));
        }
        check_le(worst, 1e-6, "random input matches the pool+affine oracle");
    }
}

void test_hba_forward() {
    section("hba forward");

    { // zero q/k and zero MLP: uniform attention, half-gated mean-pooled v
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(11);
        auto p = build_hba_params<float>(cfg, rng);
        zero(p.wq);
        zero(p.wk);
        zero(p.mlp_w1);
        zero(p.mlp_w2);
        auto f = randn_tensor<float>({1, 4, 2, 2}, rng);
        auto out = hba_forward(f, p);
        const int dv = cfg.dv();
        double worst = 0;
        for (int h = 0; h < 2; ++h)
            for (int m = 0; m < dv; ++m) {
                // mean of v over tokens for this head/dim
                double mean = 0;
                for (int t = 0; t < 4; ++t) {
                    double v = 0;
                    for (int c = 0; c < 4; ++c)
                        v += f->at(0, c, t / 2, t % 2) *
                             p.wv->data[static_cast<std::size_t>(c) * 2 * dv + h * dv + m];
                    mean += v;
                }
                mean /= 4.0;
                const int c = h * dv + m;
                for (int t = 0; t < 4; ++t)
                    worst = std::max(worst,
                                     std::abs(static_cast<double>(out->at(0, c, t / 2, t % 2)) - 0.5 * mean));
            }
        check_le(worst, 1e-6, "uniform attention degenerates to 0.5 x mean-pooled v");
    }

    { // attention rows sum to 1 on random input
        auto cfg = small_cfg(4, 3, 2);
        Rng rng(13);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({2, 4, 3, 3}, rng);
        auto q = project_tokens(f, p.wq, cfg.heads);
        auto weights = softmax(add(content_scores(f, p), relative_scores(q, p)), SoftmaxAxis::Width);
        double worst = 0;
        for (int n = 0; n < 2; ++n)
            for (int h = 0; h < 2; ++h)
                for (int i = 0; i < 9; ++i) {
                    double sum = 0;
                    for (int j = 0; j < 9; ++j) sum += weights->at(n, h, i, j);
                    worst = std::max(worst, std::abs(sum - 1.0));
                }
        check_le(worst, 1e-5, "softmax(F_S+F_R) rows sum to 1");
    }

    { // full block vs the all-loops oracle on 1x4x2x2
        auto cfg = small_cfg(4, 2, 2);
        Rng rng(17);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({1, 4, 2, 2}, rng);
        auto out = hba_forward(f, p);
        auto want = oracles::naive_hba_forward(f->data, 1, p);
        double worst = 0;
        for (std::size_t i = 0; i < want.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(out->data[i]) - want[i]));
        check_le(worst, 1e-5, "full block matches the brute-force oracle");
    }

    { // variant flags: selfatt-style block and head-axis softmax
        auto cfg = small_cfg(4, 2, 2, false, false);
        Rng rng(19);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({2, 4, 2, 2}, rng);
        auto out = hba_forward(f, p);
        auto want = oracles::naive_hba_forward(f->data, 2, p);
        double worst = 0;
        for (std::size_t i = 0; i < want.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(out->data[i]) - want[i]));
        check_le(worst, 1e-5, "content-only block matches the oracle");

        auto cfg2 = small_cfg(4, 2, 2);
        cfg2.softmax_over_heads = true;
        Rng rng2(23);
        auto p2 = build_hba_params<float>(cfg2, rng2);
        auto f2 = randn_tensor<float>({1, 4, 2, 2}, rng2);
        auto out2 = hba_forward(f2, p2);
        auto want2 = oracles::naive_hba_forward(f2->data, 1, p2);
        worst = 0;
        for (std::size_t i = 0; i < want2.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(out2->data[i]) - want2[i]));
        check_le(worst, 1e-5, "head-axis softmax variant matches the oracle");
    }

    { // qk scaling flag
        auto cfg = small_cfg(4, 2, 1);
        cfg.use_qk_scaling = true;
        Rng rng(29);
        auto p = build_hba_params<float>(cfg, rng);
        auto f = randn_tensor<float>({1, 4, 2, 2}, rng);
        auto out = hba_forward(f, p);
        auto want = oracles::naive_hba_forward(f->data, 1, p);
        double worst = 0;
        for (std::size_t i = 0; i < want.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(out->data[i]) - want[i]));
        check_le(worst, 1e-5, "scaled-scores flag matches the oracle");
    }

    { // gradients of sum(F') w.r.t. input and every parameter group
        auto make = [&]<class Real>() {
            GradCase<Real> gc;
            gc.name = "hba_block";
            auto cfg = small_cfg(4, 2, 2);
            Rng rng(31);
            auto p = std::make_shared<HbaParams<Real>>(build_hba_params<Real>(cfg, rng));
            auto f = make_tensor<Real>({2, 4, 2, 2}, true);
            fill_uniform_f32(*f, rng, -1.0, 1.0);
            // regenerate parameter values as exactly float-representable
            Rng prng(37);
            for (auto t : {p->wq, p->wk, p->wv, p->mlp_w1, p->mlp_w2})
                fill_uniform_f32(*t, prng, -0.7, 0.7);
            for (auto t : {p->mlp_b1, p->mlp_b2}) fill_uniform_f32(*t, prng, -0.2, 0.2);
            gc.leaves = {f, p->wq, p->wk, p->wv, p->mlp_w1, p->mlp_b1, p->mlp_w2, p->mlp_b2};
            gc.leaf_names = {"F", "W_Q", "W_K", "W_V", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"};
            gc.forward = [p](const std::vector<TensorPtr<Real>>& l) {
                return reduce_sum(hba_forward(l[0], *p));
            };
            return gc;
        };
        // eps 1e-4: the block is strongly nonlinear, so the truncation term of
        // a 1e-3 step already exceeds the f64 tolerance
        auto rep = dual_grad_check([&] { return make.template operator()<float>(); },
                                   [&] { return make.template operator()<double>(); }, 1e-4);
        check_le(rep.f32.max_rel, 1e-3, "full HBA block gradients (f32 mode)");
        check_le(rep.f64.max_rel, 1e-5, "full HBA block gradients (f64 mode)");
    }
}

void test_param_count() {
    section("parameter count");

    auto cfg = small_cfg(8, 4, 2);
    cfg.mlp_reduction = 4;
    const std::int64_t heads = cfg.heads, c = cfg.channels, dk = cfg.dk(), dv = cfg.dv();
    const std::int64_t want = heads * c * (2 * dk + dv) + 2 * c * (c / cfg.mlp_reduction) +
                              c / cfg.mlp_reduction + c;
    check(hba_param_count(cfg) == want, "count equals heads*C*(2dk+dv) + MLP weights + biases");

    Rng rng(41);
    auto p = build_hba_params<float>(cfg, rng);
    std::vector<std::pair<std::string, TensorPtr<float>>> named;
    hba_collect(p, "blk", named);
    std::int64_t total = 0;
    for (auto& [name, t] : named) total += t->numel();
    check(total == want, "collected tensors sum to the closed-form count");

    auto cfg_no_channel = small_cfg(8, 4, 2, true, false);
    check(hba_param_count(cfg) - hba_param_count(cfg_no_channel) ==
              2 * c * (c / cfg.mlp_reduction) + c / cfg.mlp_reduction + c,
          "channel-MLP delta matches (hba1 minus selfatt identity)");
}

} // namespace

int main() {
    test_content_scores();
    test_relative_scores();
    test_channel_scores();
    test_hba_forward();
    test_param_count();
    return finish("test_attention");
}
