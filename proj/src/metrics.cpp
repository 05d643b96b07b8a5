#include "hba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace hba {

std::optional<Centroid> extract_centroid(const float* prob, int h, int w, float threshold) {
    const std::size_t n = static_cast<std::size_t>(h) * w;
    std::vector<std::int32_t> label(n, -1);
    long best_size = 0;
    std::int64_t best_seed = -1;
    double best_sx = 0, best_sy = 0;
    std::vector<std::int64_t> stack;

    for (std::int64_t seed = 0; seed < static_cast<std::int64_t>(n); ++seed) {
        if (label[static_cast<std::size_t>(seed)] != -1 ||
            !(prob[static_cast<std::size_t>(seed)] > threshold))
            continue;
        long size = 0;
        double sx = 0, sy = 0;
        stack.clear();
        stack.push_back(seed);
        label[static_cast<std::size_t>(seed)] = 1;
        while (!stack.empty()) {
            const std::int64_t cur = stack.back();
            stack.pop_back();
            const int y = static_cast<int>(cur / w), x = static_cast<int>(cur % w);
            ++size;
            sx += x;
            sy += y;
            const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                const std::int64_t ni = static_cast<std::int64_t>(ny) * w + nx;
                if (label[static_cast<std::size_t>(ni)] != -1 ||
                    !(prob[static_cast<std::size_t>(ni)] > threshold))
                    continue;
                label[static_cast<std::size_t>(ni)] = 1;
                stack.push_back(ni);
            }
        }
        // larger wins; equal sizes keep the earlier scan-order seed
        if (size > best_size) {
            best_size = size;
            best_seed = seed;
            best_sx = sx;
            best_sy = sy;
        }
    }
    (void)best_seed;
    if (best_size == 0) return std::nullopt;
    Centroid c;
    c.size = best_size;
    c.x = best_sx / best_size;
    c.y = best_sy / best_size;
    return c;
}

double euclidean_distance(double x1, double y1, double x2, double y2) {
    return std::hypot(x1 - x2, y1 - y2);
}

double dice_coefficient(const std::uint8_t* pred, const std::uint8_t* truth, std::size_t n) {
    long inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int pv = pred[i] ? 1 : 0, gv = truth[i] ? 1 : 0;
        inter += pv & gv;
        p += pv;
        g += gv;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

InferFn make_model_infer(const ModelParams<float>& params) {
    return [&params](const TensorPtr<float>& image) {
        return model_forward(params, image, RunMode::Eval);
    };
}

namespace {

std::vector<float> sigmoid_plane(const TensorPtr<float>& logits, int channel) {
    const Shape s = logits->shape;
    std::vector<float> p(static_cast<std::size_t>(s.h) * s.w);
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            const float z = logits->at(0, channel, y, x);
            p[static_cast<std::size_t>(y) * s.w + x] =
                z >= 0 ? 1.f / (1.f + std::exp(-z)) : std::exp(z) / (1.f + std::exp(z));
        }
    return p;
}

std::vector<std::uint8_t> binarize(const std::vector<float>& p, float threshold) {
    std::vector<std::uint8_t> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] > threshold ? 1 : 0;
    return m;
}

} // namespace

EvalReport evaluate(const InferFn& infer, const std::vector<FundusSample>& samples,
                    const PreprocessOpts& opts, Basis basis, float threshold) {
    std::vector<const FundusSample*> order;
    order.reserve(samples.size());
    for (const auto& s : samples) order.push_back(&s);
    std::sort(order.begin(), order.end(),
              [](const FundusSample* a, const FundusSample* b) { return a->id < b->id; });

    EvalReport report;
    report.basis = basis;
    report.resolution = opts.out_size;
    double sum_f = 0, sum_oe = 0, sum_od = 0;

    for (const FundusSample* raw : order) {
        const TrainSample pre = preprocess(*raw, opts);
        auto logits = infer(pre.image);
        if (logits->shape.c < 2 || logits->shape.h != opts.out_size || logits->shape.w != opts.out_size)
            throw ShapeError("evaluate: model emitted " + logits->shape.str() + " for a " +
                             std::to_string(opts.out_size) + "^2 input");
        EvalRow row;
        row.id = raw->id;

        const auto p_fovea = sigmoid_plane(logits, 0);
        const auto p_od = sigmoid_plane(logits, 1);

        if (auto c = extract_centroid(p_fovea.data(), opts.out_size, opts.out_size, threshold)) {
            if (basis == Basis::Resized) {
                row.fovea_ed = euclidean_distance(c->x, c->y, pre.fovea_x, pre.fovea_y);
            } else {
                row.fovea_ed = euclidean_distance(c->x * pre.scale_x, c->y * pre.scale_y,
                                                  raw->fovea_x, raw->fovea_y);
            }
            sum_f += *row.fovea_ed;
            ++report.n_fovea;
        }

        // OD landmark truth: explicit coordinates when given, else the
        // centroid of the ground-truth mask
        std::optional<Centroid> od_pred = extract_centroid(p_od.data(), opts.out_size, opts.out_size, threshold);
        if (od_pred) {
            std::optional<std::pair<double, double>> truth_resized;
            if (pre.od_xy) {
                truth_resized = {{pre.od_xy->first, pre.od_xy->second}};
            } else if (pre.target.has_od) {
                std::vector<float> gt(pre.target.od.size());
                for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = pre.target.od[i] ? 1.f : 0.f;
                if (auto g = extract_centroid(gt.data(), opts.out_size, opts.out_size, 0.5f))
                    truth_resized = {{g->x, g->y}};
            }
            if (truth_resized) {
                if (basis == Basis::Resized) {
                    row.od_ed = euclidean_distance(od_pred->x, od_pred->y, truth_resized->first,
                                                   truth_resized->second);
                } else {
                    double tx = truth_resized->first * pre.scale_x;
                    double ty = truth_resized->second * pre.scale_y;
                    if (raw->od_xy) {
                        tx = raw->od_xy->first;
                        ty = raw->od_xy->second;
                    }
                    row.od_ed = euclidean_distance(od_pred->x * pre.scale_x, od_pred->y * pre.scale_y,
                                                   tx, ty);
                }
                sum_oe += *row.od_ed;
                ++report.n_od_ed;
            }
        }

        if (pre.target.has_od) {
            const auto pred_mask = binarize(p_od, threshold);
            row.od_dc = dice_coefficient(pred_mask.data(), pre.target.od.data(), pred_mask.size());
            sum_od += *row.od_dc;
            ++report.n_od_dc;
        }
        report.rows.push_back(std::move(row));
    }

    if (report.n_fovea > 0) report.mean_fovea_ed = sum_f / report.n_fovea;
    if (report.n_od_ed > 0) report.mean_od_ed = sum_oe / report.n_od_ed;
    if (report.n_od_dc > 0) report.mean_od_dc = sum_od / report.n_od_dc;
    return report;
}

void write_report_csv(const std::string& path, const EvalReport& report) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open report for writing: " + path);
    os << "id,fovea_ed,od_ed,od_dc\n";
    char buf[64];
    auto cell = [&](const std::optional<double>& v) {
        if (!v) return std::string();
        std::snprintf(buf, sizeof(buf), "%.4f", *v);
        return std::string(buf);
    };
    for (const auto& r : report.rows)
        os << r.id << "," << cell(r.fovea_ed) << "," << cell(r.od_ed) << "," << cell(r.od_dc) << "\n";
    os << "mean," << cell(report.mean_fovea_ed) << "," << cell(report.mean_od_ed) << ","
       << cell(report.mean_od_dc) << "\n";
    if (!os) throw IoError("write failed: " + path);
}

void write_overlay_png(const std::string& path, const TrainSample& sample,
                       const std::vector<std::uint8_t>& fovea_pred,
                       const std::vector<std::uint8_t>& od_pred) {
    const int s = sample.image->shape.h;
    ImageU8 img;
    img.width = img.height = s;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(s) * s * 3);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = static_cast<std::uint8_t>(
                    std::clamp(sample.image->at(0, c, y, x) * 255.f, 0.f, 255.f));

    auto contour = [&](const std::vector<std::uint8_t>& mask, int x, int y) {
        if (!mask[static_cast<std::size_t>(y) * s + x]) return false;
        if (x == 0 || y == 0 || x == s - 1 || y == s - 1) return true;
        return !mask[static_cast<std::size_t>(y) * s + x - 1] ||
               !mask[static_cast<std::size_t>(y) * s + x + 1] ||
               !mask[static_cast<std::size_t>(y - 1) * s + x] ||
               !mask[static_cast<std::size_t>(y + 1) * s + x];
    };
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            if (!od_pred.empty() && contour(od_pred, x, y)) {
                img.at(y, x, 0) = 40;
                img.at(y, x, 1) = 120;
                img.at(y, x, 2) = 255;
            }
            if (!fovea_pred.empty() && contour(fovea_pred, x, y)) {
                img.at(y, x, 0) = 40;
                img.at(y, x, 1) = 255;
                img.at(y, x, 2) = 60;
            }
        }
    // ground-truth fovea cross
    const int fx = static_cast<int>(std::lround(sample.fovea_x));
    const int fy = static_cast<int>(std::lround(sample.fovea_y));
    for (int d = -4; d <= 4; ++d) {
        if (fx + d >= 0 && fx + d < s && fy >= 0 && fy < s) {
            img.at(fy, fx + d, 0) = 255;
            img.at(fy, fx + d, 1) = 230;
            img.at(fy, fx + d, 2) = 40;
        }
        if (fy + d >= 0 && fy + d < s && fx >= 0 && fx < s) {
            img.at(fy + d, fx, 0) = 255;
            img.at(fy + d, fx, 1) = 230;
            img.at(fy + d, fx, 2) = 40;
        }
    }
    write_png(path, img);
}

} // namespace hba
