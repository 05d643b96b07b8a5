#include "hba/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

namespace fs = std::filesystem;

namespace hba {

namespace {

constexpr double kPi = 3.14159265358979323846;

// bilinear sample of an interleaved byte image, clamped taps
double sample_bilinear(const std::vector<std::uint8_t>& px, int w, int h, int channels, double sx,
                       double sy, int c) {
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const double fx = sx - x0, fy = sy - y0;
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return static_cast<double>(px[(static_cast<std::size_t>(y) * w + x) * channels + c]);
    };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
           fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

int nearest_index(int dst, int in, int out) {
    return std::clamp(static_cast<int>(std::floor((dst + 0.5) * static_cast<double>(in) / out)), 0,
                      in - 1);
}

float parse_float(const std::string& s, const std::string& context) {
    try {
        std::size_t used = 0;
        const float v = std::stof(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw IoError("malformed number '" + s + "' in " + context);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// dataset IO
// ---------------------------------------------------------------------------

std::vector<FundusSample> load_dataset(const std::string& root) {
    const fs::path base(root);
    const fs::path manifest = base / "fovea.csv";
    if (!fs::exists(manifest)) throw IoError("dataset manifest missing: " + manifest.string());

    auto rows = read_csv(manifest.string());
    if (!rows.empty() && rows.front().size() >= 1 && rows.front()[0] == "id") rows.erase(rows.begin());

    std::map<std::string, std::pair<float, float>> od_coords;
    if (fs::exists(base / "od.csv")) {
        auto od_rows = read_csv((base / "od.csv").string());
        if (!od_rows.empty() && od_rows.front()[0] == "id") od_rows.erase(od_rows.begin());
        for (const auto& r : od_rows) {
            if (r.size() != 3) throw IoError("malformed od.csv row for id '" + (r.empty() ? "?" : r[0]) + "'");
            od_coords[r[0]] = {parse_float(r[1], "od.csv id " + r[0]), parse_float(r[2], "od.csv id " + r[0])};
        }
    }

    std::vector<FundusSample> samples;
    for (const auto& r : rows) {
        if (r.size() != 3) throw IoError("malformed fovea.csv row (want id,x,y): '" +
                                         (r.empty() ? std::string("?") : r[0]) + "'");
        FundusSample s;
        s.id = r[0];
        s.fovea_x = parse_float(r[1], "fovea.csv id " + s.id);
        s.fovea_y = parse_float(r[2], "fovea.csv id " + s.id);

        const fs::path img_path = base / "images" / (s.id + ".png");
        if (!fs::exists(img_path))
            throw IoError("image missing for id '" + s.id + "': " + img_path.string());
        const ImageU8 img = to_rgb(read_png(img_path.string()));
        s.width = img.width;
        s.height = img.height;
        s.rgb = img.pixels;

        if (s.fovea_x < 0 || s.fovea_x >= static_cast<float>(s.width) || s.fovea_y < 0 ||
            s.fovea_y >= static_cast<float>(s.height))
            throw IoError("fovea coordinate out of bounds for id '" + s.id + "'");

        const fs::path mask_path = base / "od_masks" / (s.id + ".png");
        if (fs::exists(mask_path)) {
            const ImageU8 m = read_png(mask_path.string());
            if (m.width != s.width || m.height != s.height)
                throw IoError("od mask dimensions do not match image for id '" + s.id + "'");
            std::vector<std::uint8_t> mask(static_cast<std::size_t>(m.width) * m.height);
            for (std::size_t i = 0; i < mask.size(); ++i)
                mask[i] = m.pixels[i * static_cast<std::size_t>(m.channels)] > 127 ? 1 : 0;
            s.od_mask = std::move(mask);
        }
        if (auto it = od_coords.find(s.id); it != od_coords.end()) s.od_xy = it->second;
        samples.push_back(std::move(s));
    }
    std::sort(samples.begin(), samples.end(),
              [](const FundusSample& a, const FundusSample& b) { return a.id < b.id; });
    return samples;
}

void write_dataset(const std::string& root, const std::vector<FundusSample>& samples) {
    const fs::path base(root);
    fs::create_directories(base / "images");
    bool any_mask = false, any_od = false;
    for (const auto& s : samples) {
        any_mask = any_mask || s.od_mask.has_value();
        any_od = any_od || s.od_xy.has_value();
    }
    if (any_mask) fs::create_directories(base / "od_masks");

    std::ofstream fovea(base / "fovea.csv", std::ios::trunc);
    fovea << "id,x,y\n";
    std::ofstream od;
    if (any_od) {
        od.open(base / "od.csv", std::ios::trunc);
        od << "id,x,y\n";
    }
    char buf[128];
    for (const auto& s : samples) {
        ImageU8 img;
        img.width = s.width;
        img.height = s.height;
        img.channels = 3;
        img.pixels = s.rgb;
        write_png((base / "images" / (s.id + ".png")).string(), img);
        std::snprintf(buf, sizeof(buf), "%s,%.3f,%.3f\n", s.id.c_str(), s.fovea_x, s.fovea_y);
        fovea << buf;
        if (s.od_mask) {
            ImageU8 m;
            m.width = s.width;
            m.height = s.height;
            m.channels = 1;
            m.pixels.resize(s.od_mask->size());
            for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = (*s.od_mask)[i] ? 255 : 0;
            write_png((base / "od_masks" / (s.id + ".png")).string(), m);
        }
        if (s.od_xy) {
            std::snprintf(buf, sizeof(buf), "%s,%.3f,%.3f\n", s.id.c_str(), s.od_xy->first,
                          s.od_xy->second);
            od << buf;
        }
    }
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

TrainSample preprocess(const FundusSample& sample, const PreprocessOpts& opts) {
    if (opts.out_size < 32) throw ConfigError("preprocess: out_size must be >= 32");
    if (sample.width < 2 || sample.height < 2)
        throw ConfigError("preprocess: degenerate original size for id '" + sample.id + "'");
    const int out = opts.out_size;

    TrainSample t;
    t.id = sample.id;
    t.image = make_tensor<float>({1, 3, out, out});
    const double sx = static_cast<double>(sample.width) / out;
    const double sy = static_cast<double>(sample.height) / out;
    for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x) {
            const double src_x = (x + 0.5) * sx - 0.5;
            const double src_y = (y + 0.5) * sy - 0.5;
            for (int c = 0; c < 3; ++c)
                t.image->at(0, c, y, x) = static_cast<float>(
                    sample_bilinear(sample.rgb, sample.width, sample.height, 3, src_x, src_y, c) /
                    255.0);
        }

    t.scale_x = static_cast<float>(sample.width) / out;
    t.scale_y = static_cast<float>(sample.height) / out;
    t.fovea_x = sample.fovea_x * (static_cast<float>(out) / sample.width);
    t.fovea_y = sample.fovea_y * (static_cast<float>(out) / sample.height);
    if (sample.od_xy)
        t.od_xy = {sample.od_xy->first * (static_cast<float>(out) / sample.width),
                   sample.od_xy->second * (static_cast<float>(out) / sample.height)};

    t.target.size = out;
    t.target.fovea.assign(static_cast<std::size_t>(out) * out, 0);
    t.target.od.assign(static_cast<std::size_t>(out) * out, 0);
    const double radius = opts.fovea_radius_at_512 * out / 512.0;
    for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x) {
            const double dx = x - t.fovea_x, dy = y - t.fovea_y;
            if (dx * dx + dy * dy <= radius * radius)
                t.target.fovea[static_cast<std::size_t>(y) * out + x] = 1;
        }
    if (sample.od_mask) {
        t.target.has_od = true;
        for (int y = 0; y < out; ++y) {
            const int iy = nearest_index(y, sample.height, out);
            for (int x = 0; x < out; ++x) {
                const int ix = nearest_index(x, sample.width, out);
                t.target.od[static_cast<std::size_t>(y) * out + x] =
                    (*sample.od_mask)[static_cast<std::size_t>(iy) * sample.width + ix];
            }
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

namespace {

void rotate_image_bilinear(Tensor<float>& image, double angle) {
    const Shape s = image.shape;
    const double cx = (s.w - 1) / 2.0, cy = (s.h - 1) / 2.0;
    const double ca = std::cos(-angle), sa = std::sin(-angle);
    std::vector<float> out(image.data.size(), 0.f);
    for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const double rx = ca * (x - cx) - sa * (y - cy) + cx;
                const double ry = sa * (x - cx) + ca * (y - cy) + cy;
                if (rx < -0.5 || rx > s.w - 0.5 || ry < -0.5 || ry > s.h - 0.5) continue; // black
                const int x0 = static_cast<int>(std::floor(rx));
                const int y0 = static_cast<int>(std::floor(ry));
                const double fx = rx - x0, fy = ry - y0;
                auto at = [&](int yy, int xx) {
                    if (yy < 0 || yy >= s.h || xx < 0 || xx >= s.w) return 0.0;
                    return static_cast<double>(image.at(0, c, yy, xx));
                };
                out[static_cast<std::size_t>(s.index(0, c, y, x))] = static_cast<float>(
                    (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                    fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)));
            }
    image.data = std::move(out);
}

void rotate_mask_nearest(std::vector<std::uint8_t>& mask, int size, double angle) {
    const double cx = (size - 1) / 2.0, cy = (size - 1) / 2.0;
    const double ca = std::cos(-angle), sa = std::sin(-angle);
    std::vector<std::uint8_t> out(mask.size(), 0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double rx = ca * (x - cx) - sa * (y - cy) + cx;
            const double ry = sa * (x - cx) + ca * (y - cy) + cy;
            const int ix = static_cast<int>(std::lround(rx));
            const int iy = static_cast<int>(std::lround(ry));
            if (ix < 0 || ix >= size || iy < 0 || iy >= size) continue;
            out[static_cast<std::size_t>(y) * size + x] = mask[static_cast<std::size_t>(iy) * size + ix];
        }
    mask = std::move(out);
}

template <class Fn>
void flip_plane(int size, Fn&& swap_fn, bool horizontal) {
    for (int y = 0; y < (horizontal ? size : size / 2); ++y)
        for (int x = 0; x < (horizontal ? size / 2 : size); ++x)
            swap_fn(y, x, horizontal ? y : size - 1 - y, horizontal ? size - 1 - x : x);
}

} // namespace

void augment_with(Tensor<float>& image, TargetMask& mask, double angle_rad, bool flip_h, bool flip_v) {
    const int size = image.shape.h;
    if (mask.size != size || image.shape.w != size)
        throw ShapeError("augment: image and mask sizes disagree");
    if (angle_rad != 0.0) {
        rotate_image_bilinear(image, angle_rad);
        rotate_mask_nearest(mask.fovea, size, angle_rad);
        rotate_mask_nearest(mask.od, size, angle_rad);
    }
    auto flip_image = [&](bool horizontal) {
        for (int c = 0; c < image.shape.c; ++c)
            flip_plane(size, [&](int y1, int x1, int y2, int x2) {
                std::swap(image.at(0, c, y1, x1), image.at(0, c, y2, x2));
            }, horizontal);
    };
    auto flip_mask = [&](std::vector<std::uint8_t>& m, bool horizontal) {
        flip_plane(size, [&](int y1, int x1, int y2, int x2) {
            std::swap(m[static_cast<std::size_t>(y1) * size + x1],
                      m[static_cast<std::size_t>(y2) * size + x2]);
        }, horizontal);
    };
    if (flip_h) {
        flip_image(true);
        flip_mask(mask.fovea, true);
        flip_mask(mask.od, true);
    }
    if (flip_v) {
        flip_image(false);
        flip_mask(mask.fovea, false);
        flip_mask(mask.od, false);
    }
}

void augment(Tensor<float>& image, TargetMask& mask, Rng& rng) {
    const double angle = rng.uniform(-0.2, 0.2);
    const bool fh = rng.bernoulli(0.5);
    const bool fv = rng.bernoulli(0.5);
    augment_with(image, mask, angle, fh, fv);
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

SplitIndices split_dataset(std::size_t n_samples, std::uint64_t seed) {
    if (n_samples < 5) throw ConfigError("split: need at least 5 samples, got " + std::to_string(n_samples));
    std::vector<int> order(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) order[i] = static_cast<int>(i);
    Rng rng = Rng::derive(seed, {0x73706c6974ULL}); // "split" stream
    for (std::size_t i = n_samples - 1; i > 0; --i)
        std::swap(order[i], order[rng.bounded(i + 1)]);

    const auto n = static_cast<double>(n_samples);
    const std::size_t n_test = static_cast<std::size_t>(std::lround(0.15 * n));
    const std::size_t pool = n_samples - n_test;
    const std::size_t n_val = static_cast<std::size_t>(std::lround(0.20 * static_cast<double>(pool)));

    SplitIndices s;
    s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                 order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

// ---------------------------------------------------------------------------
// synthetic fundus generator
// ---------------------------------------------------------------------------

namespace {

struct Ellipse {
    double cx, cy, ra, rb, phi;
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double u = std::cos(phi) * dx + std::sin(phi) * dy;
        const double v = -std::sin(phi) * dx + std::cos(phi) * dy;
        return (u * u) / (ra * ra) + (v * v) / (rb * rb) <= 1.0;
    }
};

void stamp_disc(std::vector<std::uint8_t>& rgb, int size, double cx, double cy, double r,
                const double color[3], double blend) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + r + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            if (d2 > r * r) continue;
            for (int c = 0; c < 3; ++c) {
                auto& px = rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c];
                px = static_cast<std::uint8_t>(
                    std::clamp((1.0 - blend) * px + blend * color[c], 0.0, 255.0));
            }
        }
}

} // namespace

std::vector<FundusSample> synth_fundus(int n, int size, double disease_level, std::uint64_t seed) {
    if (size < 64) throw ConfigError("synth_fundus: size must be >= 64");
    if (disease_level < 0.0 || disease_level > 1.0)
        throw ConfigError("synth_fundus: disease_level must lie in [0,1]");

    std::vector<FundusSample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::derive(seed, {0x73796e7468ULL, static_cast<std::uint64_t>(i)}); // "synth"
        const double s = size;
        const double cx = s / 2.0, cy = s / 2.0;
        const double fov_r = 0.48 * s;

        const int dir = rng.bernoulli(0.5) ? 1 : -1; // left vs right eye
        const double fx = cx + rng.uniform(-0.04, 0.04) * s;
        const double fy = cy + rng.uniform(-0.04, 0.04) * s;
        Ellipse od;
        od.cx = fx + dir * (0.30 + rng.uniform(-0.03, 0.03)) * s;
        od.cy = fy + rng.uniform(-0.08, 0.08) * s;
        od.ra = (0.070 + rng.uniform(0.0, 0.015)) * s;
        od.rb = od.ra * (0.82 + rng.uniform(0.0, 0.12));
        od.phi = rng.uniform(-0.3, 0.3);
        const double tint = rng.uniform(-12.0, 12.0);
        const double tex_fx = rng.uniform(2.0, 5.0), tex_fy = rng.uniform(2.0, 5.0);
        const double tex_px = rng.uniform(0.0, 2.0 * kPi), tex_py = rng.uniform(0.0, 2.0 * kPi);

        FundusSample fsamp;
        fsamp.id = "synth_" + std::string(4 - std::min<std::size_t>(4, std::to_string(i).size()), '0') +
                   std::to_string(i);
        fsamp.width = size;
        fsamp.height = size;
        fsamp.fovea_x = static_cast<float>(fx);
        fsamp.fovea_y = static_cast<float>(fy);
        fsamp.od_xy = {static_cast<float>(od.cx), static_cast<float>(od.cy)};
        fsamp.rgb.assign(static_cast<std::size_t>(size) * size * 3, 0);
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(size) * size, 0);

        // background: shaded disc with gentle mottling, black outside the field of view
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double d = std::hypot(x - cx, y - cy);
                if (d >= fov_r) continue;
                const double shade = 1.0 - 0.45 * (d / fov_r) * (d / fov_r);
                const double mottle = 6.0 * std::sin(tex_fx * kPi * x / s + tex_px) *
                                      std::sin(tex_fy * kPi * y / s + tex_py);
                double col[3] = {178.0 + tint + mottle, 84.0 + 0.5 * tint + 0.6 * mottle,
                                 36.0 + 0.3 * mottle};
                // macular darkening around the fovea
                const double fd2 = (x - fx) * (x - fx) + (y - fy) * (y - fy);
                const double sigma = 0.045 * s;
                const double dark = 1.0 - 0.45 * std::exp(-fd2 / (2.0 * sigma * sigma));
                for (int c = 0; c < 3; ++c)
                    fsamp.rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::clamp(col[c] * shade * dark, 0.0, 255.0));
            }

        // vessel arcs fanning out of the disc
        const int n_vessels = 7;
        for (int v = 0; v < n_vessels; ++v) {
            const double base_angle = (v - (n_vessels - 1) / 2.0) * 0.42 + (dir > 0 ? kPi : 0.0);
            const double bend = rng.uniform(-0.5, 0.5);
            const double reach = fov_r * (0.75 + rng.uniform(0.0, 0.2));
            const double px0 = od.cx, py0 = od.cy;
            const double px2 = cx + (reach * 0.95) * std::cos(base_angle + bend * 0.6);
            const double py2 = cy + (reach * 0.95) * std::sin(base_angle + bend * 0.6);
            const double mx = (px0 + px2) / 2.0 - bend * 0.25 * (py2 - py0);
            const double my = (py0 + py2) / 2.0 + bend * 0.25 * (px2 - px0);
            const double color[3] = {118.0, 30.0, 20.0};
            const int steps = 3 * size;
            for (int t = 0; t <= steps; ++t) {
                const double u = static_cast<double>(t) / steps;
                const double bx = (1 - u) * (1 - u) * px0 + 2 * (1 - u) * u * mx + u * u * px2;
                const double by = (1 - u) * (1 - u) * py0 + 2 * (1 - u) * u * my + u * u * py2;
                if (std::hypot(bx - cx, by - cy) >= fov_r) break;
                const double width = std::max(0.6, (2.4 - 1.7 * u) * s / 512.0 * 2.0);
                stamp_disc(fsamp.rgb, size, bx, by, width, color, 0.65);
            }
        }

        // bright elliptical disc; the mask is exact by construction
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                if (!od.contains(x, y)) continue;
                if (std::hypot(x - cx, y - cy) >= fov_r) continue;
                mask[static_cast<std::size_t>(y) * size + x] = 1;
                const double rim = (x - od.cx) * (x - od.cx) / (od.ra * od.ra) +
                                   (y - od.cy) * (y - od.cy) / (od.rb * od.rb);
                const double glow = 1.0 - 0.25 * rim;
                const double col[3] = {232.0 * glow, 206.0 * glow, 132.0 * glow};
                for (int c = 0; c < 3; ++c)
                    fsamp.rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::clamp(col[c], 0.0, 255.0));
            }

        // lesions: bright drusen-like dots and darker hemorrhage-like blobs
        const int n_lesions = static_cast<int>(std::lround(disease_level * 22));
        for (int le = 0; le < n_lesions; ++le) {
            for (int attempt = 0; attempt < 40; ++attempt) {
                const double ang = rng.uniform(0.0, 2.0 * kPi);
                const double rad = fov_r * 0.92 * std::sqrt(rng.uniform(0.0, 1.0));
                const double lx = cx + rad * std::cos(ang);
                const double ly = cy + rad * std::sin(ang);
                if (od.contains(lx, ly)) continue;
                if (std::hypot(lx - fx, ly - fy) < 0.06 * s) continue;
                const bool bright = rng.bernoulli(0.5);
                const double lr = bright ? rng.uniform(1.0, 2.5) * s / 128.0
                                         : rng.uniform(1.5, 4.0) * s / 128.0;
                if (std::hypot(lx - cx, ly - cy) + lr >= fov_r) continue;
                const double bright_col[3] = {225.0, 196.0, 148.0};
                const double dark_col[3] = {96.0, 24.0, 18.0};
                stamp_disc(fsamp.rgb, size, lx, ly, lr, bright ? bright_col : dark_col, 0.8);
                break;
            }
        }

        fsamp.od_mask = std::move(mask);
        samples.push_back(std::move(fsamp));
    }
    return samples;
}

TensorPtr<float> target_to_tensor(const TargetMask& mask) {
    const int s = mask.size;
    auto t = make_tensor<float>({1, 2, s, s});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            t->at(0, 0, y, x) = mask.fovea[static_cast<std::size_t>(y) * s + x] ? 1.f : 0.f;
            t->at(0, 1, y, x) = mask.od[static_cast<std::size_t>(y) * s + x] ? 1.f : 0.f;
        }
    return t;
}

} // namespace hba
