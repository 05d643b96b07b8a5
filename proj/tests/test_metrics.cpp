// Metric tests: centroid extraction with connected components, Euclidean
// distance, Dice coefficient, and the evaluation driver with oracle models.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "hba/metrics.hpp"
#include "test_util.hpp"

using namespace hba;
using namespace testutil;

namespace {

void test_extract_centroid() {
    section("extract_centroid");

    { // single bright pixel at (x=10, y=20)
        std::vector<float> p(32 * 32, 0.f);
        p[20 * 32 + 10] = 0.9f;
        auto c = extract_centroid(p.data(), 32, 32);
        check(c && std::abs(c->x - 10.0) < 1e-9 && std::abs(c->y - 20.0) < 1e-9,
              "single pixel at (10,20) gives centroid (10,20)");
    }

    { // filled 5x5 square, rows 2..6, cols 4..8
        std::vector<float> p(16 * 16, 0.f);
        for (int y = 2; y <= 6; ++y)
            for (int x = 4; x <= 8; ++x) p[static_cast<std::size_t>(y) * 16 + x] = 1.f;
        auto c = extract_centroid(p.data(), 16, 16);
        check(c && std::abs(c->x - 6.0) < 1e-9 && std::abs(c->y - 4.0) < 1e-9,
              "filled square centroid is (6,4) in (x,y)");
    }

    { // two components, 30 px and 5 px: only the larger one counts
        std::vector<float> p(32 * 32, 0.f);
        for (int y = 10; y < 15; ++y)
            for (int x = 3; x < 9; ++x) p[static_cast<std::size_t>(y) * 32 + x] = 1.f; // 30 px
        for (int x = 20; x < 25; ++x) p[static_cast<std::size_t>(2) * 32 + x] = 1.f;   // 5 px
        auto c = extract_centroid(p.data(), 32, 32);
        check(c && c->size == 30 && std::abs(c->x - 5.5) < 1e-9 && std::abs(c->y - 12.0) < 1e-9,
              "largest component wins, smaller blob ignored");
    }

    { // equal sizes: the component seen first in scan order wins
        std::vector<float> p(16 * 16, 0.f);
        p[1 * 16 + 1] = 1.f; // first in scan order
        p[8 * 16 + 8] = 1.f;
        auto c = extract_centroid(p.data(), 16, 16);
        check(c && c->x == 1.0 && c->y == 1.0, "size tie keeps the earlier scan-order component");
    }

    { // nothing above threshold
        std::vector<float> p(8 * 8, 0.4f);
        check(!extract_centroid(p.data(), 8, 8, 0.5f), "no pixel above threshold gives none");
    }

    { // translation consistency
        std::vector<float> p(64 * 64, 0.f), q(64 * 64, 0.f);
        for (int y = 10; y < 20; ++y)
            for (int x = 12; x < 22; ++x) {
                p[static_cast<std::size_t>(y) * 64 + x] = 1.f;
                q[static_cast<std::size_t>(y + 7) * 64 + (x + 5)] = 1.f;
            }
        auto a = extract_centroid(p.data(), 64, 64);
        auto b = extract_centroid(q.data(), 64, 64);
        check(a && b && std::abs(b->x - a->x - 5.0) < 1e-9 && std::abs(b->y - a->y - 7.0) < 1e-9,
              "integer shift moves the centroid by exactly that shift");
    }
}

void test_distances() {
    section("euclidean distance / dice coefficient");

    check_near(euclidean_distance(3.0, 4.0, 3.0, 4.0), 0.0, 1e-12, "identical points give 0");
    check_near(euclidean_distance(0.0, 0.0, 3.0, 4.0), 5.0, 1e-12, "3-4-5 triangle gives 5");
    // resized-space delta (2,0) under a 4x scale factor
    check_near(euclidean_distance(2.0 * 4.0, 0.0, 0.0, 0.0), 8.0, 1e-12,
               "scale-4 back-projection turns a 2 px delta into 8");

    std::vector<std::uint8_t> a(100, 0), b(100, 0);
    for (int i = 0; i < 20; ++i) a[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)] = 1;
    check_near(dice_coefficient(a.data(), b.data(), 100), 1.0, 1e-12, "identical masks give 1");

    std::fill(b.begin(), b.end(), 0);
    for (int i = 40; i < 60; ++i) b[static_cast<std::size_t>(i)] = 1;
    check_near(dice_coefficient(a.data(), b.data(), 100), 0.0, 1e-12, "disjoint masks give 0");

    std::fill(b.begin(), b.end(), 0);
    for (int i = 10; i < 30; ++i) b[static_cast<std::size_t>(i)] = 1; // overlap 10 of 20
    check_near(dice_coefficient(a.data(), b.data(), 100), 0.5, 1e-12,
               "half-overlapping equal-area masks give 0.5");

    std::vector<std::uint8_t> e1(50, 0), e2(50, 0);
    check_near(dice_coefficient(e1.data(), e2.data(), 50), 1.0, 1e-12, "both empty defined as 1");

    { // symmetry on random masks
        Rng rng(3);
        bool symmetric = true;
        for (int t = 0; t < 20; ++t) {
            std::vector<std::uint8_t> u(64), v(64);
            for (auto& x : u) x = rng.bernoulli(0.4);
            for (auto& x : v) x = rng.bernoulli(0.4);
            symmetric = symmetric &&
                        dice_coefficient(u.data(), v.data(), 64) == dice_coefficient(v.data(), u.data(), 64);
        }
        check(symmetric, "dice coefficient is symmetric in its arguments");
    }
}

void test_evaluate() {
    section("evaluate");

    auto samples = synth_fundus(10, 128, 0.4, 21);
    PreprocessOpts opts;
    opts.out_size = 128;

    auto oracle_logits = [&](const TrainSample& pre, int shift_x, int shift_y) {
        auto logits = full_tensor<float>({1, 2, 128, 128}, -30.f);
        for (int y = 0; y < 128; ++y)
            for (int x = 0; x < 128; ++x) {
                const int sy = y - shift_y, sx = x - shift_x;
                if (sy < 0 || sy >= 128 || sx < 0 || sx >= 128) continue;
                if (pre.target.fovea[static_cast<std::size_t>(sy) * 128 + sx]) logits->at(0, 0, y, x) = 30.f;
                if (pre.target.od[static_cast<std::size_t>(sy) * 128 + sx]) logits->at(0, 1, y, x) = 30.f;
            }
        return logits;
    };

    { // a model that emits the ground truth verbatim
        std::size_t call = 0;
        InferFn oracle = [&](const TensorPtr<float>& image) {
            (void)image;
            return oracle_logits(preprocess(samples[call++], opts), 0, 0);
        };
        auto report = evaluate(oracle, samples, opts, Basis::Resized);
        bool ok = report.rows.size() == 10 && report.n_fovea == 10 && report.n_od_dc == 10;
        for (const auto& r : report.rows)
            ok = ok && r.fovea_ed && *r.fovea_ed < 1.0 && r.od_dc && *r.od_dc >= 0.999;
        check(ok, "oracle model scores ED ~0 and DC 1 on every image");
        check(report.mean_od_dc && *report.mean_od_dc >= 0.999, "aggregate DC is the mean of rows");
    }

    { // all-zero (fully negative) output
        InferFn zero = [&](const TensorPtr<float>&) { return full_tensor<float>({1, 2, 128, 128}, -30.f); };
        auto report = evaluate(zero, samples, opts, Basis::Resized);
        bool ok = report.n_fovea == 0 && report.n_od_ed == 0 && !report.mean_fovea_ed;
        for (const auto& r : report.rows) ok = ok && !r.fovea_ed && r.od_dc && *r.od_dc == 0.0;
        check(ok, "all-negative output leaves EDs missing and DC at 0");
    }

    { // perturbed oracle shifted by (3,4) px -> mean fovea ED 5 +- 0.5
        std::size_t call = 0;
        InferFn shifted = [&](const TensorPtr<float>& image) {
            (void)image;
            return oracle_logits(preprocess(samples[call++], opts), 3, 4);
        };
        auto report = evaluate(shifted, samples, opts, Basis::Resized);
        check(report.mean_fovea_ed.has_value(), "perturbed oracle yields fovea EDs");
        check_near(*report.mean_fovea_ed, 5.0, 0.5, "mean fovea ED of a (3,4) shift");
        check(report.mean_od_ed && std::abs(*report.mean_od_ed - 5.0) < 0.5,
              "mean OD ED follows the same shift");
    }

    { // original-basis back projection: samples at 256 evaluated at 128
        auto big = synth_fundus(3, 256, 0.0, 33);
        std::size_t call = 0;
        InferFn oracle = [&](const TensorPtr<float>&) {
            return oracle_logits(preprocess(big[call++], opts), 2, 0);
        };
        auto resized = evaluate(oracle, big, opts, Basis::Resized);
        call = 0;
        auto original = evaluate(oracle, big, opts, Basis::Original);
        check(resized.mean_fovea_ed && original.mean_fovea_ed &&
                  std::abs(*original.mean_fovea_ed - 2.0 * *resized.mean_fovea_ed) < 0.35,
              "original-basis EDs scale by the resize factor");
    }

    { // evaluation is reproducible
        std::size_t call = 0;
        InferFn oracle = [&](const TensorPtr<float>&) {
            return oracle_logits(preprocess(samples[call++ % 10], opts), 1, 1);
        };
        auto r1 = evaluate(oracle, samples, opts, Basis::Resized);
        auto r2 = evaluate(oracle, samples, opts, Basis::Resized);
        bool same = r1.rows.size() == r2.rows.size();
        for (std::size_t i = 0; same && i < r1.rows.size(); ++i)
            same = r1.rows[i].fovea_ed == r2.rows[i].fovea_ed && r1.rows[i].od_dc == r2.rows[i].od_dc;
        check(same, "evaluate on the same inputs is bit-reproducible");
    }
}

void test_report_csv() {
    section("report csv");

    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "hba_metrics_test";
    fs::create_directories(dir);

    EvalReport r;
    r.rows.push_back({"a", 1.25, std::nullopt, 0.5});
    r.rows.push_back({"b", std::nullopt, 2.0, std::nullopt});
    r.mean_fovea_ed = 1.25;
    r.mean_od_ed = 2.0;
    r.mean_od_dc = 0.5;
    const auto path = (dir / "report.csv").string();
    write_report_csv(path, r);

    std::ifstream is(path);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    check(all == "id,fovea_ed,od_ed,od_dc\na,1.2500,,0.5000\nb,,2.0000,\nmean,1.2500,2.0000,0.5000\n",
          "CSV carries empty cells for missing metrics and a trailing mean row");
    fs::remove_all(dir);
}

} // namespace

int main() {
    test_extract_centroid();
    test_distances();
    test_evaluate();
    test_report_csv();
    return finish("test_metrics");
}
