#include "hba/gradsuites.hpp"

#include "hba/gradcheck.hpp"
#include "hba/model.hpp"
#include "hba/ops.hpp"
#include "hba/train.hpp"

namespace hba {

namespace {

// scalar reduction with fixed pseudo-random weights so gradients stay
// informative everywhere
template <class Real>
TensorPtr<Real> weighted_sum(const TensorPtr<Real>& t, std::uint64_t seed) {
    Rng rng(seed);
    const auto n = static_cast<int>(t->numel());
    auto w = make_tensor<Real>({1, 1, n, 1}, false);
    fill_uniform_f32(*w, rng, -1.0, 1.0);
    return matmul(reshape(t, {1, 1, 1, n}), w);
}

template <class Real>
TensorPtr<Real> leaf(GradCase<Real>& gc, const char* name, Shape s, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    auto t = make_tensor<Real>(s, true);
    fill_uniform_f32(*t, rng, lo, hi);
    gc.leaves.push_back(t);
    gc.leaf_names.emplace_back(name);
    return t;
}

// builds one dual-precision target from a templated case maker
template <class MakerT>
GradTarget run_target(const std::string& name, MakerT maker, double eps, int samples = 0) {
    auto rep = dual_grad_check([&] { return maker.template operator()<float>(); },
                               [&] { return maker.template operator()<double>(); }, eps, samples);
    return {name, rep.f32.max_rel, rep.f64.max_rel};
}

} // namespace

std::vector<GradTarget> gradsuite_ops() {
    std::vector<GradTarget> out;

    out.push_back(run_target("conv2d(3x3,pad1,bias)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(101);
        auto x = leaf(gc, "x", {1, 2, 5, 5}, rng);
        auto k = leaf(gc, "k", {3, 2, 3, 3}, rng);
        auto b = leaf(gc, "b", {1, 3, 1, 1}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            return weighted_sum(conv2d(l[0], l[1], 1, 1, l[2]), 11);
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("conv2d(stride2)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(102);
        auto x = leaf(gc, "x", {2, 3, 7, 7}, rng);
        auto k = leaf(gc, "k", {2, 3, 3, 3}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            return weighted_sum(conv2d(l[0], l[1], 2, 1), 12);
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("pool2d(max+avg)+global", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(103);
        auto x = leaf(gc, "x", {2, 2, 6, 6}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto a = weighted_sum(pool2d(l[0], PoolMode::Avg, 2, 2), 13);
            auto b = weighted_sum(pool2d(l[0], PoolMode::Max, 3, 3), 14);
            auto c = weighted_sum(global_pool2d(l[0], PoolMode::Avg), 15);
            auto d = weighted_sum(global_pool2d(l[0], PoolMode::Max), 16);
            return add(add(a, b), add(c, d));
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("dense(+bias)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(104);
        auto x = leaf(gc, "x", {1, 2, 3, 4}, rng);
        auto w = leaf(gc, "w", {1, 1, 4, 5}, rng);
        auto b = leaf(gc, "b", {1, 1, 1, 5}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            return weighted_sum(dense(l[0], l[1], l[2]), 17);
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("activations(relu,sigmoid,softmax)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(105);
        auto x = leaf(gc, "x", {2, 3, 2, 5}, rng, -2.0, 2.0);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto a = weighted_sum(relu(l[0]), 18);
            auto b = weighted_sum(sigmoid(l[0]), 19);
            auto c = weighted_sum(softmax(l[0], SoftmaxAxis::Width), 20);
            auto d = weighted_sum(softmax(l[0], SoftmaxAxis::Channel), 21);
            return add(add(a, b), add(c, d));
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("resample(bilinear,nearest)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(106);
        auto x = leaf(gc, "x", {1, 2, 4, 4}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto up = weighted_sum(resample(l[0], 7, 7, ResampleMode::Bilinear), 22);
            auto dn = weighted_sum(resample(l[0], 3, 5, ResampleMode::Nearest), 23);
            return add(up, dn);
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("elementwise+layout", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(107);
        auto a = leaf(gc, "a", {2, 4, 3, 3}, rng);
        auto b = leaf(gc, "b", {2, 4, 3, 3}, rng);
        auto g = leaf(gc, "gate", {2, 4, 1, 1}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto cat = concat_channels(add(l[0], l[1]), scale_channels(l[0], l[2]));
            auto tok = merge_heads(split_heads(nchw_to_tokens(cat), 2));
            auto back = tokens_to_nchw(tok, 3, 3);
            return add(weighted_sum(scale(back, Real(0.5)), 24), reduce_sum(reshape(l[1], {1, 1, 4, 18})));
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("matmul(nn,nt,broadcast)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(108);
        auto a = leaf(gc, "a", {2, 2, 3, 4}, rng);
        auto b = leaf(gc, "b", {2, 2, 4, 2}, rng);
        auto c = leaf(gc, "c", {2, 2, 5, 4}, rng);
        auto d = leaf(gc, "d", {1, 1, 4, 3}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto nn = weighted_sum(matmul(l[0], l[1]), 25);
            auto nt = weighted_sum(matmul(l[2], l[0], true), 26);
            auto bc = weighted_sum(matmul(l[0], l[3]), 27);
            return add(nn, add(nt, bc));
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("batchnorm(train,eval)", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(109);
        auto x = leaf(gc, "x", {2, 3, 3, 3}, rng);
        auto g = leaf(gc, "gamma", {1, 3, 1, 1}, rng, 0.5, 1.5);
        auto b = leaf(gc, "beta", {1, 3, 1, 1}, rng, -0.5, 0.5);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto rm = make_tensor<Real>({1, 3, 1, 1});
            auto rv = full_tensor<Real>({1, 3, 1, 1}, Real(1));
            auto trn = batchnorm2d(l[0], l[1], l[2], rm, rv, true, Real(0.1), Real(1e-5), false);
            auto rm2 = full_tensor<Real>({1, 3, 1, 1}, Real(0.1));
            auto rv2 = full_tensor<Real>({1, 3, 1, 1}, Real(0.7));
            auto evl = batchnorm2d(l[0], l[1], l[2], rm2, rv2, false, Real(0.1), Real(1e-5), false);
            return add(weighted_sum(trn, 28), weighted_sum(evl, 29));
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("rel_pos_scores", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(110);
        auto q = leaf(gc, "q", {2, 2, 9, 4}, rng);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            auto rh = tensor_from<Real>({1, 1, 5, 4}, build_offset_table<Real>(3, 4));
            auto rw = tensor_from<Real>({1, 1, 5, 4}, build_offset_table<Real>(3, 4));
            return weighted_sum(rel_pos_scores(l[0], rh, rw, 3), 30);
        };
        return gc;
    }, 1e-3));

    out.push_back(run_target("dice_loss", [&]<class Real>() {
        GradCase<Real> gc;
        Rng rng(111);
        auto z = leaf(gc, "logits", {2, 2, 4, 4}, rng, -2.0, 2.0);
        gc.forward = [](const std::vector<TensorPtr<Real>>& l) {
            Rng trng(7);
            auto target = make_tensor<Real>({2, 2, 4, 4});
            for (auto& v : target->data) v = trng.bernoulli(0.4) ? Real(1) : Real(0);
            return dice_loss_with_logits(l[0], target, Real(1));
        };
        return gc;
    }, 1e-4));

    return out;
}

std::vector<GradTarget> gradsuite_hba() {
    std::vector<GradTarget> out;

    auto block_case = [](const char* name, HbaConfig cfg, std::uint64_t seed, Shape in) {
        return [name, cfg, seed, in]<class Real>() {
            GradCase<Real> gc;
            gc.name = name;
            Rng rng(seed);
            auto p = std::make_shared<HbaParams<Real>>(build_hba_params<Real>(cfg, rng));
            auto f = make_tensor<Real>(in, true);
            Rng frng(seed + 1);
            fill_uniform_f32(*f, frng, -1.0, 1.0);
            Rng prng(seed + 2);
            for (auto t : {p->wq, p->wk, p->wv}) fill_uniform_f32(*t, prng, -0.7, 0.7);
            if (cfg.use_channel) {
                for (auto t : {p->mlp_w1, p->mlp_w2}) fill_uniform_f32(*t, prng, -0.7, 0.7);
                for (auto t : {p->mlp_b1, p->mlp_b2}) fill_uniform_f32(*t, prng, -0.2, 0.2);
            }
            gc.leaves.push_back(f);
            gc.leaf_names.emplace_back("F");
            for (auto& [n, t] : [&] {
                     std::vector<std::pair<std::string, TensorPtr<Real>>> named;
                     hba_collect(*p, "p", named);
                     return named;
                 }()) {
                gc.leaves.push_back(t);
                gc.leaf_names.push_back(n);
            }
            gc.forward = [p](const std::vector<TensorPtr<Real>>& l) {
                return reduce_sum(hba_forward(l[0], *p));
            };
            return gc;
        };
    };

    HbaConfig full;
    full.channels = 4;
    full.heads = 2;
    full.grid = 2;
    full.mlp_reduction = 2;
    out.push_back(run_target("hba(C4,S2,h2,full)", block_case("full", full, 201, {2, 4, 2, 2}), 1e-4));

    HbaConfig wide = full;
    wide.grid = 3;
    out.push_back(run_target("hba(C4,S3,h2,full)", block_case("wide", wide, 202, {1, 4, 3, 3}), 1e-4));

    HbaConfig content = full;
    content.use_relative = false;
    content.use_channel = false;
    out.push_back(
        run_target("hba(content-only)", block_case("content", content, 203, {2, 4, 2, 2}), 1e-4));

    HbaConfig headsm = full;
    headsm.softmax_over_heads = true;
    out.push_back(
        run_target("hba(head-axis softmax)", block_case("headsm", headsm, 204, {1, 4, 2, 2}), 1e-4));

    HbaConfig scaled = full;
    scaled.use_qk_scaling = true;
    out.push_back(run_target("hba(qk-scaled)", block_case("scaled", scaled, 205, {1, 4, 2, 2}), 1e-4));

    return out;
}

std::vector<GradTarget> gradsuite_model() {
    auto maker = []<class Real>() {
        GradCase<Real> gc;
        gc.name = "model64";
        NetworkConfig cfg;
        cfg.levels = 3;
        cfg.base_channels = 4;
        cfg.attn_grid = 8;
        cfg.input_size = 64;
        cfg.heads = 2;
        cfg.mlp_reduction = 4;
        cfg.variant = Variant::HbaAll;
        auto model = std::make_shared<ModelParams<Real>>(build_model<Real>(cfg, 301));
        Rng rng(302);
        auto x = make_tensor<Real>({1, 3, 64, 64}, true);
        fill_uniform_f32(*x, rng, 0.0, 1.0);
        auto target = make_tensor<Real>({1, 2, 64, 64});
        for (int c = 0; c < 2; ++c)
            for (int y = 0; y < 64; ++y)
                for (int xx = 0; xx < 64; ++xx) {
                    const double cy = c == 0 ? 30 : 44, cx = c == 0 ? 26 : 14, r = c == 0 ? 6 : 9;
                    target->at(0, c, y, xx) =
                        (y - cy) * (y - cy) + (xx - cx) * (xx - cx) <= r * r ? Real(1) : Real(0);
                }
        gc.leaves.push_back(x);
        gc.leaf_names.emplace_back("image");
        for (auto& nt : collect_tensors(*model)) {
            if (!nt.learnable) continue;
            gc.leaves.push_back(nt.tensor);
            gc.leaf_names.push_back(nt.name);
        }
        gc.forward = [model, target](const std::vector<TensorPtr<Real>>& l) {
            return dice_loss_with_logits(model_forward(*model, l[0], RunMode::Train), target, Real(1));
        };
        return gc;
    };
    // eps 3e-6: small enough that the +-h interval rarely straddles a
    // relu/max-pool kink at this depth, large enough to stay above the f64
    // rounding floor of the difference quotient
    return {run_target("model(64^2, dice)", maker, 3e-6, 2)};
}

bool gradsuite_passed(const std::vector<GradTarget>& targets) {
    for (const auto& t : targets)
        if (t.err32 > kGradTol32 || t.err64 > kGradTol64) return false;
    return true;
}

} // namespace hba
