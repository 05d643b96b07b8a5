// Acceptance suite: one pass/fail line per criterion, exit code equal to the
// number of failed criteria. Criteria marked with their pinned tolerances.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hba/gradcheck.hpp"
#include "hba/gradsuites.hpp"
#include "hba/metrics.hpp"
#include "hba/train.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace hba;
using Clock = std::chrono::steady_clock;

namespace {

int g_failed = 0;
std::string g_cli;
fs::path g_dir;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void criterion(const char* id, bool ok, const std::string& detail, double secs) {
    std::printf("[%s] %s  %s (%.1f s)\n", id, ok ? "PASS" : "FAIL", detail.c_str(), secs);
    std::fflush(stdout);
    if (!ok) ++g_failed;
}

int run_cli(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " > " + (g_dir / "cli.out").string() + " 2> " +
                            (g_dir / "cli.err").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// --------------------------------------------------------------------------
// A1: finite-difference gradient suite, <= 1e-3 (f32) / 1e-5 (f64)
// --------------------------------------------------------------------------
void a1_gradients() {
    const auto t0 = Clock::now();
    double worst32 = 0, worst64 = 0;
    std::string worst_name = "-";
    bool ok = true;
    for (const auto& suite : {gradsuite_ops(), gradsuite_hba(), gradsuite_model()}) {
        for (const auto& t : suite) {
            ok = ok && t.err32 <= kGradTol32 && t.err64 <= kGradTol64;
            if (t.err32 > worst32) {
                worst32 = t.err32;
                worst_name = t.name;
            }
            worst64 = std::max(worst64, t.err64);
        }
    }
    std::ostringstream d;
    d << "ops+hba+model(64^2) finite differences: worst f32 " << worst32 << " (" << worst_name
      << "), worst f64 " << worst64;
    criterion("A1", ok, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A2: softmax(F_S+F_R) rows sum to 1 within 1e-5; sigma(F_C) in (0,1)
// --------------------------------------------------------------------------
void a2_normalization() {
    const auto t0 = Clock::now();
    HbaConfig cfg;
    cfg.channels = 4;
    cfg.heads = 2;
    cfg.grid = 3;
    cfg.mlp_reduction = 2;
    Rng prng(41);
    auto params = build_hba_params<float>(cfg, prng);

    double worst_row = 0;
    bool gate_open = true;
    Rng rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        auto f = make_tensor<float>({1, 4, 3, 3});
        fill_uniform_f32(*f, rng, -3.0, 3.0);
        auto q = project_tokens(f, params.wq, cfg.heads);
        auto weights = softmax(add(content_scores(f, params), relative_scores(q, params)),
                               SoftmaxAxis::Width);
        for (int h = 0; h < 2; ++h)
            for (int i = 0; i < 9; ++i) {
                double sum = 0;
                for (int j = 0; j < 9; ++j) sum += weights->at(0, h, i, j);
                worst_row = std::max(worst_row, std::abs(sum - 1.0));
            }
        auto gate = sigmoid(channel_scores(f, params));
        for (float v : gate->data) gate_open = gate_open && v > 0.f && v < 1.f;
    }
    std::ostringstream d;
    d << "1000 random inputs: worst |row sum - 1| = " << worst_row << ", channel gates strictly in (0,1)";
    criterion("A2", worst_row <= 1e-5 && gate_open, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A3: vectorized block matches the all-loops oracle, <= 1e-5
// --------------------------------------------------------------------------
void a3_brute_force() {
    const auto t0 = Clock::now();
    double worst = 0;
    int configs = 0;
    std::uint64_t seed = 500;
    for (int c = 1; c <= 4; ++c)
        for (int s = 1; s <= 3; ++s)
            for (int heads = 1; heads <= 2; ++heads) {
                if (c % heads != 0) continue;
                for (int r : {1, c}) {
                    if (c % r != 0) continue;
                    HbaConfig cfg;
                    cfg.channels = c;
                    cfg.heads = heads;
                    cfg.grid = s;
                    cfg.mlp_reduction = r;
                    Rng rng(seed++);
                    auto p = build_hba_params<float>(cfg, rng);
                    auto f = randn_tensor<float>({2, c, s, s}, rng);
                    auto out = hba_forward(f, p);
                    auto want = oracles::naive_hba_forward(f->data, 2, p);
                    for (std::size_t i = 0; i < want.size(); ++i)
                        worst = std::max(worst,
                                         std::abs(static_cast<double>(out->data[i]) - want[i]));
                    ++configs;
                }
            }
    std::ostringstream d;
    d << configs << " configs (C<=4, S<=3, heads<=2): worst |delta| = " << worst;
    criterion("A3", worst <= 1e-5, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A4: offset tables bit-identical across 10 training steps and uncounted
// --------------------------------------------------------------------------
void a4_parameter_free() {
    const auto t0 = Clock::now();
    NetworkConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.attn_grid = 8;
    cfg.input_size = 64;
    cfg.heads = 2;
    cfg.mlp_reduction = 4;
    cfg.variant = Variant::HbaAll;
    auto model = build_model<float>(cfg, 77);

    std::vector<std::vector<float>> before;
    auto snapshot = [&] {
        std::vector<std::vector<float>> tables;
        if (model.bottom_attn) {
            tables.push_back(model.bottom_attn->rel_h->data);
            tables.push_back(model.bottom_attn->rel_w->data);
        }
        for (auto& s : model.skip_attn)
            if (s) {
                tables.push_back(s->rel_h->data);
                tables.push_back(s->rel_w->data);
            }
        return tables;
    };
    before = snapshot();

    auto raw = synth_fundus(4, 64, 0.3, 99);
    PreprocessOpts popts;
    popts.out_size = 64;
    std::vector<TrainSample> set;
    for (const auto& s : raw) set.push_back(preprocess(s, popts));
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_epochs = 10; // 10 optimizer steps at one batch per epoch
    tc.early_stop_patience = 10000;
    tc.seed = 7;
    fit(model, set, set, tc);

    auto after = snapshot();
    bool identical = before.size() == after.size() && !before.empty();
    for (std::size_t i = 0; identical && i < before.size(); ++i)
        identical = before[i].size() == after[i].size() &&
                    std::memcmp(before[i].data(), after[i].data(),
                                before[i].size() * sizeof(float)) == 0;

    // counted parameters exclude the tables
    std::int64_t table_scalars = 0;
    for (const auto& t : after) table_scalars += static_cast<std::int64_t>(t.size());
    std::int64_t collected = 0;
    bool none_collected = true;
    for (auto& nt : collect_tensors(model)) {
        if (nt.learnable) collected += nt.tensor->numel();
        none_collected = none_collected && nt.name.find("rel_") == std::string::npos;
    }
    const bool count_excludes = param_count(model) == collected && none_collected;

    std::ostringstream d;
    d << before.size() << " offset tables (" << table_scalars
      << " scalars) unchanged after 10 adam steps; param_count covers only collected learnables";
    criterion("A4", identical && count_excludes, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A5: hba-all overfits 8 synthetic 128^2 images, train Dice < 0.15 and
//     train-set mean fovea ED < 8 px within 300 epochs
// --------------------------------------------------------------------------
void a5_desk_learning() {
    const auto t0 = Clock::now();
    auto raw = synth_fundus(8, 128, 0.5, 2024);
    PreprocessOpts popts;
    popts.out_size = 128;
    std::vector<TrainSample> set;
    for (const auto& s : raw) set.push_back(preprocess(s, popts));

    NetworkConfig cfg;
    cfg.levels = 3;
    cfg.base_channels = 8;
    cfg.attn_grid = 8;
    cfg.input_size = 128;
    cfg.heads = 4;
    cfg.mlp_reduction = 8;
    cfg.variant = Variant::HbaAll;
    auto model = build_model<float>(cfg, 2024);

    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_epochs = 300;
    tc.early_stop_patience = 100000;
    tc.seed = 2024;

    float final_loss = 1.f;
    double final_ed = 999.0;
    int epochs_run = 0;
    auto stop = [&](const EpochStats& s) {
        epochs_run = s.epoch + 1;
        final_loss = s.train_loss;
        if (s.train_loss >= 0.12f) return false;
        auto rep = evaluate(make_model_infer(model), raw, popts, Basis::Resized);
        final_ed = rep.mean_fovea_ed ? *rep.mean_fovea_ed : 999.0;
        return final_ed < 6.0; // stop once safely past the thresholds
    };
    fit(model, set, set, tc, stop);
    if (final_ed == 999.0) { // thresholds not reached by early exit: measure once
        auto rep = evaluate(make_model_infer(model), raw, popts, Basis::Resized);
        final_ed = rep.mean_fovea_ed ? *rep.mean_fovea_ed : 999.0;
    }

    // keep the overfit checkpoint for the CLI oracle-evaluation path
    save_checkpoint(model, (g_dir / "overfit.ckpt").string());
    write_dataset((g_dir / "overfit_data").string(), raw);

    std::ostringstream d;
    d << "train Dice " << final_loss << " (< 0.15), train-set fovea ED " << final_ed
      << " px (< 8) after " << epochs_run << " epochs";
    criterion("A5", final_loss < 0.15f && final_ed < 8.0 && epochs_run <= 300, d.str(),
              seconds_since(t0));

    // CLI evaluate on the overfit checkpoint reaches oracle-level DC
    const auto t1 = Clock::now();
    const int rc = run_cli("evaluate --checkpoint " + (g_dir / "overfit.ckpt").string() + " --data " +
                           (g_dir / "overfit_data").string() + " --out " + (g_dir / "overfit_eval").string());
    double mean_dc = 0;
    if (rc == 0) {
        std::ifstream is(g_dir / "overfit_eval" / "eval" / "report.csv");
        std::string line, last;
        while (std::getline(is, line))
            if (line.rfind("mean,", 0) == 0) last = line;
        const auto pos = last.rfind(',');
        if (pos != std::string::npos && pos + 1 < last.size()) mean_dc = std::stod(last.substr(pos + 1));
    }
    std::ostringstream d2;
    d2 << "cmd_evaluate on the overfit checkpoint: mean OD DC " << mean_dc << " (>= 0.90)";
    criterion("A5b", rc == 0 && mean_dc >= 0.90, d2.str(), seconds_since(t1));
}

// --------------------------------------------------------------------------
// A6: ablation ladder structure at the full-scale config (counting only)
// --------------------------------------------------------------------------
void a6_ablation_structure() {
    const auto t0 = Clock::now();
    const fs::path cfg_path = g_dir / "fullscale.cfg";
    {
        std::ofstream os(cfg_path);
        os << "model.levels=3\n"
              "model.base_channels=256\n"
              "model.stem_channels=64\n"
              "model.attn_grid=16\n"
              "model.variant=hba-all\n"
              "model.input_size=512\n"
              "model.heads=4\n"
              "model.attn_key_dim=16\n"
              "model.mlp_reduction=16\n"
              "run.seed=1\n"
              "run.out=" << (g_dir / "fullscale_out").string() << "\n";
    }
    const int rc = run_cli("ablate --config " + cfg_path.string() + " --count-only");

    std::vector<std::string> variants;
    std::vector<long long> params;
    if (rc == 0) {
        std::ifstream is(g_dir / "fullscale_out" / "ablation.csv");
        std::string line;
        std::getline(is, line); // header
        while (std::getline(is, line)) {
            std::stringstream ss(line);
            std::string v, p;
            std::getline(ss, v, ',');
            std::getline(ss, p, ',');
            variants.push_back(v);
            params.push_back(std::stoll(p));
        }
    }
    bool ok = rc == 0 && variants.size() == 5;
    ok = ok && variants[0] == "unet" && variants[1] == "unet+resnet" &&
         variants[2] == "unet+resnet+selfatt" && variants[3] == "hba1" && variants[4] == "hba-all";
    for (std::size_t i = 1; ok && i < params.size(); ++i) ok = params[i] > params[i - 1];
    double d_selfatt = 0, d_hba1 = 0, d_hbaall = 0;
    if (ok) {
        d_selfatt = 100.0 * (params[2] - params[1]) / static_cast<double>(params[1]);
        d_hba1 = 100.0 * (params[3] - params[2]) / static_cast<double>(params[2]);
        d_hbaall = 100.0 * (params[4] - params[3]) / static_cast<double>(params[3]);
        ok = d_selfatt < 5.0 && d_hba1 < 5.0 && d_hbaall < 5.0 && d_selfatt > 0 && d_hba1 > 0 &&
             d_hbaall > 0;
    }
    std::ostringstream d;
    d << "five rows strictly increasing";
    if (!params.empty()) {
        d << " (" << params[0];
        for (std::size_t i = 1; i < params.size(); ++i) d << " < " << params[i];
        d << "); attention additions +" << d_selfatt << "% / +" << d_hba1 << "% / +" << d_hbaall
          << "% (< 5% each)";
    }
    criterion("A6", ok, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A7: closed-form metric examples and the perturbed-oracle evaluation
// --------------------------------------------------------------------------
void a7_metrics() {
    const auto t0 = Clock::now();
    bool ok = std::abs(euclidean_distance(0, 0, 3, 4) - 5.0) < 1e-12;

    std::vector<std::uint8_t> a(64, 0), b(64, 0);
    for (int i = 0; i < 16; ++i) a[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)] = 1;
    ok = ok && dice_coefficient(a.data(), b.data(), 64) == 1.0;
    std::fill(b.begin(), b.end(), 0);
    for (int i = 32; i < 48; ++i) b[static_cast<std::size_t>(i)] = 1;
    ok = ok && dice_coefficient(a.data(), b.data(), 64) == 0.0;

    auto samples = synth_fundus(10, 128, 0.4, 321);
    PreprocessOpts opts;
    opts.out_size = 128;
    std::size_t call = 0;
    InferFn shifted = [&](const TensorPtr<float>&) {
        auto pre = preprocess(samples[call++], opts);
        auto logits = full_tensor<float>({1, 2, 128, 128}, -30.f);
        for (int y = 0; y < 128; ++y)
            for (int x = 0; x < 128; ++x) {
                const int sy = y - 4, sx = x - 3;
                if (sy < 0 || sx < 0) continue;
                if (pre.target.fovea[static_cast<std::size_t>(sy) * 128 + sx])
                    logits->at(0, 0, y, x) = 30.f;
                if (pre.target.od[static_cast<std::size_t>(sy) * 128 + sx]) logits->at(0, 1, y, x) = 30.f;
            }
        return logits;
    };
    auto report = evaluate(shifted, samples, opts, Basis::Resized);
    const double mean_ed = report.mean_fovea_ed ? *report.mean_fovea_ed : 999.0;
    ok = ok && std::abs(mean_ed - 5.0) <= 0.5;

    std::ostringstream d;
    d << "(0,0)-(3,4) -> 5; identical/disjoint DC -> 1/0; perturbed-oracle mean ED " << mean_ed
      << " (5.0 +- 0.5)";
    criterion("A7", ok, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A8: schedule and loss contracts
// --------------------------------------------------------------------------
void a8_schedule_loss() {
    const auto t0 = Clock::now();
    TrainConfig cfg;
    bool ok = std::abs(static_cast<double>(lr_at(0, cfg)) - 0.0025) < 1e-9;
    ok = ok && std::abs(static_cast<double>(lr_at(150, cfg)) - 0.0025) < 1e-9;
    ok = ok && std::abs(static_cast<double>(lr_at(152, cfg)) - 0.0025 * 0.985 * 0.985) < 1e-8;

    // Dice in [0,1] on random logits; ~0 on a saturated perfect prediction
    Rng rng(9);
    bool in_range = true;
    for (int t = 0; t < 30; ++t) {
        auto logits = make_tensor<float>({1, 2, 5, 5});
        auto target = make_tensor<float>({1, 2, 5, 5});
        fill_uniform_f32(*logits, rng, -50.0, 50.0);
        for (auto& v : target->data) v = rng.bernoulli(0.5) ? 1.f : 0.f;
        const float l = dice_loss(logits, target, 1.f)->data[0];
        in_range = in_range && l >= 0.f && l <= 1.f;
    }
    auto target = make_tensor<float>({1, 2, 5, 5});
    for (std::size_t i = 0; i < target->data.size(); ++i) target->data[i] = i % 3 == 0 ? 1.f : 0.f;
    auto logits = make_tensor<float>({1, 2, 5, 5});
    for (std::size_t i = 0; i < logits->data.size(); ++i)
        logits->data[i] = target->data[i] > 0 ? 30.f : -30.f;
    const float perfect = dice_loss(logits, target, 1.f)->data[0];
    ok = ok && in_range && perfect <= 1e-3f;

    std::ostringstream d;
    d << "lr_at(0)=lr_at(150)=0.0025, lr_at(152)=0.00242556; Dice in [0,1], perfect prediction -> "
      << perfect;
    criterion("A8", ok, d.str(), seconds_since(t0));
}

// --------------------------------------------------------------------------
// A9: byte-identical reruns of cmd_train under the reproducible flag
// --------------------------------------------------------------------------
void a9_reproducibility() {
    const auto t0 = Clock::now();
    const int rc_s = run_cli("synth --out " + (g_dir / "a9_data").string() + " --count 8 --size 64 --seed 12");
    {
        std::ofstream os(g_dir / "a9.cfg");
        os << "model.levels=2\nmodel.base_channels=4\nmodel.attn_grid=8\nmodel.variant=hba-all\n"
              "model.input_size=64\nmodel.heads=2\nmodel.mlp_reduction=4\n"
              "train.batch_size=4\ntrain.max_epochs=6\ntrain.early_stop_patience=10000\n"
           << "data.root=" << (g_dir / "a9_data").string() << "\nrun.seed=33\n"
           << "run.out=" << (g_dir / "a9_run1").string() << "\n";
    }
    const int rc1 = run_cli("train --config " + (g_dir / "a9.cfg").string() + " --reproducible");
    const int rc2 = run_cli("train --config " + (g_dir / "a9.cfg").string() + " --reproducible --out " +
                            (g_dir / "a9_run2").string());
    bool ok = rc_s == 0 && rc1 == 0 && rc2 == 0;
    bool history_same = false, ckpt_same = false;
    if (ok) {
        history_same = slurp(g_dir / "a9_run1" / "history.csv") == slurp(g_dir / "a9_run2" / "history.csv");
        ckpt_same = slurp(g_dir / "a9_run1" / "checkpoints" / "best.ckpt") ==
                        slurp(g_dir / "a9_run2" / "checkpoints" / "best.ckpt") &&
                    slurp(g_dir / "a9_run1" / "checkpoints" / "last.ckpt") ==
                        slurp(g_dir / "a9_run2" / "checkpoints" / "last.ckpt");
        ok = history_same && ckpt_same;
    }
    std::ostringstream d;
    d << "two cmd_train runs, same config+seed: history.csv " << (history_same ? "identical" : "differ")
      << ", checkpoints " << (ckpt_same ? "identical" : "differ");
    criterion("A9", ok, d.str(), seconds_since(t0));
}

} // namespace

int main() {
    const char* cli = std::getenv("HBA_CLI");
    if (!cli || !*cli) {
        std::printf("HBA_CLI not set; cannot locate the binary under test\n");
        return 1;
    }
    g_cli = cli;
    g_dir = fs::temp_directory_path() / "hba_acceptance";
    fs::remove_all(g_dir);
    fs::create_directories(g_dir);

    const auto t0 = Clock::now();
    a1_gradients();
    a2_normalization();
    a3_brute_force();
    a4_parameter_free();
    a5_desk_learning();
    a6_ablation_structure();
    a7_metrics();
    a8_schedule_loss();
    a9_reproducibility();

    std::printf("acceptance: %d criterion(s) failed, total %.1f s\n", g_failed, seconds_since(t0));
    fs::remove_all(g_dir);
    return g_failed;
}
