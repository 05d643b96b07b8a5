// Command-line entry point: train / ablate / evaluate / predict / gradcheck /
// synth over plain key=value run configurations.

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hba/data.hpp"
#include "hba/gradsuites.hpp"
#include "hba/metrics.hpp"
#include "hba/model.hpp"
#include "hba/train.hpp"

namespace fs = std::filesystem;
using namespace hba;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void print_usage() {
    std::fprintf(stderr,
                 "usage: hba <command> [options]\n"
                 "\n"
                 "commands:\n"
                 "  train      --config FILE [--seed N] [--out DIR] [--reproducible] [--resume STATE]\n"
                 "  ablate     --config FILE [--seed N] [--out DIR] [--count-only] [--reproducible]\n"
                 "  evaluate   --checkpoint CKPT --data DIR [--out DIR] [--basis resized|original]\n"
                 "             [--overlay]\n"
                 "  predict    --checkpoint CKPT [--out DIR] [--basis resized|original] IMAGE...\n"
                 "  gradcheck  ops|hba|model\n"
                 "  synth      --out DIR [--count N] [--size N] [--disease-level X] [--seed N]\n");
}

// ---------------------------------------------------------------------------
// argument and config parsing
// ---------------------------------------------------------------------------

struct Args {
    std::map<std::string, std::string> options;
    std::vector<std::string> positional;

    bool has(const std::string& k) const { return options.count(k) > 0; }
    std::string get(const std::string& k, const std::string& def = "") const {
        auto it = options.find(k);
        return it == options.end() ? def : it->second;
    }
    std::string require(const std::string& k) const {
        if (!has(k)) throw UsageError("missing required option --" + k);
        return options.at(k);
    }
};

Args parse_args(int argc, char** argv, int start, const std::vector<std::string>& value_opts,
                const std::vector<std::string>& flag_opts) {
    Args a;
    for (int i = start; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) == 0) {
            const std::string name = arg.substr(2);
            if (std::find(value_opts.begin(), value_opts.end(), name) != value_opts.end()) {
                if (i + 1 >= argc) throw UsageError("option --" + name + " needs a value");
                a.options[name] = argv[++i];
            } else if (std::find(flag_opts.begin(), flag_opts.end(), name) != flag_opts.end()) {
                a.options[name] = "1";
            } else {
                throw UsageError("unknown option --" + name);
            }
        } else {
            a.positional.push_back(arg);
        }
    }
    return a;
}

struct RunConfig {
    NetworkConfig model;
    TrainConfig train;
    std::string data_root;
    float fovea_radius = 32.f; // at 512^2, scaled with the input size
    std::string out_dir = "run_out";
    std::uint64_t seed = 1;
    bool reproducible = false;

    PreprocessOpts preprocess_opts() const {
        PreprocessOpts o;
        o.out_size = model.input_size;
        o.fovea_radius_at_512 = fovea_radius;
        return o;
    }

    std::string serialize() const {
        std::ostringstream os;
        std::istringstream ms(model.serialize());
        std::string line;
        while (std::getline(ms, line)) os << "model." << line << "\n";
        std::istringstream ts(train.serialize());
        while (std::getline(ts, line)) os << "train." << line << "\n";
        os << "data.root=" << data_root << "\n";
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(fovea_radius));
        os << "data.fovea_radius=" << buf << "\n";
        os << "run.out=" << out_dir << "\n";
        os << "run.seed=" << seed << "\n";
        os << "run.reproducible=" << (reproducible ? 1 : 0) << "\n";
        return os.str();
    }
};

std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::string model_text, train_text;
    std::map<std::string, std::string> other;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string s = strip(line);
        if (s.empty() || s[0] == '#') continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value, got '" + s + "'");
        const std::string key = strip(s.substr(0, eq));
        const std::string value = strip(s.substr(eq + 1));
        if (key.rfind("model.", 0) == 0) {
            model_text += key.substr(6) + "=" + value + "\n";
        } else if (key.rfind("train.", 0) == 0) {
            train_text += key.substr(6) + "=" + value + "\n";
        } else if (key == "data.root" || key == "data.fovea_radius" || key == "run.out" ||
                   key == "run.seed" || key == "run.reproducible") {
            other[key] = value;
        } else {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    RunConfig rc;
    rc.model = NetworkConfig::deserialize(model_text);
    rc.train = TrainConfig::deserialize(train_text);
    if (other.count("data.root")) rc.data_root = other["data.root"];
    if (other.count("data.fovea_radius")) rc.fovea_radius = std::stof(other["data.fovea_radius"]);
    if (other.count("run.out")) rc.out_dir = other["run.out"];
    if (other.count("run.seed")) rc.seed = std::stoull(other["run.seed"]);
    if (other.count("run.reproducible")) rc.reproducible = other["run.reproducible"] != "0";
    return rc;
}

void apply_overrides(RunConfig& rc, const Args& args) {
    if (args.has("seed")) rc.seed = std::stoull(args.get("seed"));
    if (args.has("out")) rc.out_dir = args.get("out");
    if (args.has("reproducible")) rc.reproducible = true;
    rc.train.seed = rc.seed;
}

// resolved copy written before any work starts; the run is re-creatable
// from this file alone
void write_resolved(const RunConfig& rc) {
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "config.resolved", std::ios::trunc);
    if (!os) throw IoError("cannot write resolved config under " + rc.out_dir);
    os << rc.serialize();
}

Basis parse_basis(const std::string& name) {
    if (name == "resized") return Basis::Resized;
    if (name == "original") return Basis::Original;
    throw UsageError("unknown basis '" + name + "' (expected resized or original)");
}

struct LoadedData {
    std::vector<FundusSample> raw;
    SplitIndices split;
    std::vector<TrainSample> train, val, test;
};

LoadedData load_and_split(const RunConfig& rc) {
    if (rc.data_root.empty()) throw ConfigError("data.root is not set");
    LoadedData d;
    d.raw = load_dataset(rc.data_root);
    d.split = split_dataset(d.raw.size(), rc.seed);
    const auto opts = rc.preprocess_opts();
    for (int i : d.split.train) d.train.push_back(preprocess(d.raw[static_cast<std::size_t>(i)], opts));
    for (int i : d.split.val) d.val.push_back(preprocess(d.raw[static_cast<std::size_t>(i)], opts));
    for (int i : d.split.test) d.test.push_back(preprocess(d.raw[static_cast<std::size_t>(i)], opts));
    return d;
}

std::vector<FundusSample> subset(const std::vector<FundusSample>& all, const std::vector<int>& idx) {
    std::vector<FundusSample> out;
    for (int i : idx) out.push_back(all[static_cast<std::size_t>(i)]);
    return out;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(int argc, char** argv) {
    Args args = parse_args(argc, argv, 2, {"config", "seed", "out", "resume"}, {"reproducible"});
    RunConfig rc = parse_run_config(args.require("config"));
    apply_overrides(rc, args);
    rc.model.validate();
    rc.train.validate();
    write_resolved(rc);
    fs::create_directories(fs::path(rc.out_dir) / "checkpoints");

    LoadedData data = load_and_split(rc);
    std::printf("dataset: %zu samples (%zu train / %zu val / %zu test) at %d^2\n", data.raw.size(),
                data.train.size(), data.val.size(), data.test.size(), rc.model.input_size);

    auto model = build_model<float>(rc.model, rc.seed);
    std::printf("model: %s variant, %lld parameters\n", variant_name(rc.model.variant),
                static_cast<long long>(param_count(model)));

    TrainState state;
    if (args.has("resume")) state = load_train_state(args.get("resume"), rc.model);

    auto progress = [](const EpochStats& s) {
        std::printf("epoch %4d  lr %.6g  train %.4f  val %.4f\n", s.epoch, static_cast<double>(s.lr),
                    static_cast<double>(s.train_loss), static_cast<double>(s.val_loss));
        std::fflush(stdout);
        return false;
    };
    FitResult result = fit(model, data.train, data.val, rc.train, progress, &state);

    write_history_csv((fs::path(rc.out_dir) / "history.csv").string(), result.history);
    save_checkpoint(model, (fs::path(rc.out_dir) / "checkpoints" / "best.ckpt").string());
    save_checkpoint(state.live, (fs::path(rc.out_dir) / "checkpoints" / "last.ckpt").string());
    save_train_state((fs::path(rc.out_dir) / "checkpoints" / "train_state.bin").string(), state,
                     rc.model);
    std::printf("best epoch %d (val %.4f); wrote %s\n", result.best_epoch,
                static_cast<double>(result.best_val), rc.out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(int argc, char** argv) {
    Args args = parse_args(argc, argv, 2, {"config", "seed", "out"}, {"count-only", "reproducible"});
    RunConfig rc = parse_run_config(args.require("config"));
    apply_overrides(rc, args);
    const bool count_only = args.has("count-only");
    write_resolved(rc);

    LoadedData data;
    if (!count_only) {
        data = load_and_split(rc);
        fs::create_directories(fs::path(rc.out_dir) / "checkpoints");
    }

    struct Row {
        std::string variant;
        long long params = 0;
        std::optional<double> fovea_ed, od_dc;
        bool failed = false;
        std::string error;
    };
    std::vector<Row> rows;

    for (Variant v : kVariantLadder) {
        Row row;
        row.variant = variant_name(v);
        try {
            NetworkConfig cfg = rc.model;
            cfg.variant = v;
            cfg.validate();
            auto model = build_model<float>(cfg, rc.seed);
            row.params = static_cast<long long>(param_count(model));
            if (!count_only) {
                TrainConfig tc = rc.train;
                fit(model, data.train, data.val, tc);
                save_checkpoint(model, (fs::path(rc.out_dir) / "checkpoints" /
                                        (row.variant + ".ckpt")).string());
                auto report = evaluate(make_model_infer(model), subset(data.raw, data.split.test),
                                       rc.preprocess_opts(), Basis::Resized);
                row.fovea_ed = report.mean_fovea_ed;
                row.od_dc = report.mean_od_dc;
            }
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            std::fprintf(stderr, "variant %s failed: %s\n", row.variant.c_str(), e.what());
        }
        rows.push_back(std::move(row));
    }

    std::ofstream csv(fs::path(rc.out_dir) / "ablation.csv", std::ios::trunc);
    csv << "variant,params,fovea_ed,od_dc\n";
    std::printf("%-22s %12s %10s %8s\n", "variant", "params", "fovea_ed", "od_dc");
    for (const auto& r : rows) {
        char fe[32] = "", dc[32] = "";
        if (r.fovea_ed) std::snprintf(fe, sizeof(fe), "%.3f", *r.fovea_ed);
        if (r.od_dc) std::snprintf(dc, sizeof(dc), "%.4f", *r.od_dc);
        if (r.failed) {
            csv << r.variant << ",failed,,\n";
            std::printf("%-22s %12s\n", r.variant.c_str(), "failed");
        } else {
            csv << r.variant << "," << r.params << "," << fe << "," << dc << "\n";
            std::printf("%-22s %12lld %10s %8s\n", r.variant.c_str(), r.params, fe, dc);
        }
    }
    bool any_failed = false;
    for (const auto& r : rows) any_failed = any_failed || r.failed;
    return any_failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// evaluate / predict
// ---------------------------------------------------------------------------

int cmd_evaluate(int argc, char** argv) {
    Args args = parse_args(argc, argv, 2, {"checkpoint", "data", "out", "basis"}, {"overlay"});
    auto params = load_checkpoint(args.require("checkpoint"));
    auto samples = load_dataset(args.require("data"));
    const Basis basis = parse_basis(args.get("basis", "resized"));
    const std::string out = args.get("out", "eval_out");

    PreprocessOpts opts;
    opts.out_size = params.cfg.input_size;
    auto report = evaluate(make_model_infer(params), samples, opts, basis);

    fs::create_directories(fs::path(out) / "eval");
    write_report_csv((fs::path(out) / "eval" / "report.csv").string(), report);
    std::printf("evaluated %zu images at %d^2 (%s basis)\n", report.rows.size(), opts.out_size,
                basis == Basis::Resized ? "resized" : "original");
    if (report.mean_fovea_ed)
        std::printf("mean fovea ED %.3f px over %d images\n", *report.mean_fovea_ed, report.n_fovea);
    else
        std::printf("fovea ED undefined (no predictions above threshold)\n");
    if (report.mean_od_ed) std::printf("mean OD ED %.3f px over %d images\n", *report.mean_od_ed, report.n_od_ed);
    if (report.mean_od_dc) std::printf("mean OD DC %.4f over %d images\n", *report.mean_od_dc, report.n_od_dc);
    if (report.n_od_dc == 0) std::fprintf(stderr, "warning: no OD masks in dataset, DC omitted\n");

    if (args.has("overlay")) {
        fs::create_directories(fs::path(out) / "eval" / "overlays");
        for (const auto& raw : samples) {
            auto pre = preprocess(raw, opts);
            auto logits = model_forward(params, pre.image, RunMode::Eval);
            const int s = opts.out_size;
            std::vector<std::uint8_t> fovea(static_cast<std::size_t>(s) * s), od(fovea.size());
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    fovea[static_cast<std::size_t>(y) * s + x] = logits->at(0, 0, y, x) > 0 ? 1 : 0;
                    od[static_cast<std::size_t>(y) * s + x] = logits->at(0, 1, y, x) > 0 ? 1 : 0;
                }
            write_overlay_png((fs::path(out) / "eval" / "overlays" / (raw.id + ".png")).string(), pre,
                              fovea, od);
        }
        std::printf("wrote overlays for %zu images\n", samples.size());
    }
    return 0;
}

int cmd_predict(int argc, char** argv) {
    Args args = parse_args(argc, argv, 2, {"checkpoint", "out", "basis"}, {"overlay"});
    if (args.positional.empty()) throw UsageError("predict needs at least one image path");
    auto params = load_checkpoint(args.require("checkpoint"));
    const Basis basis = parse_basis(args.get("basis", "resized"));
    const std::string out = args.get("out", "predict_out");
    fs::create_directories(fs::path(out) / "predictions");

    PreprocessOpts opts;
    opts.out_size = params.cfg.input_size;
    std::ofstream coords(fs::path(out) / "predictions" / "coordinates.csv", std::ios::trunc);
    coords << "id,fovea_x,fovea_y,od_x,od_y\n";

    for (const auto& path : args.positional) {
        const ImageU8 img = to_rgb(read_png(path));
        FundusSample raw;
        raw.id = fs::path(path).stem().string();
        raw.width = img.width;
        raw.height = img.height;
        raw.rgb = img.pixels;
        auto pre = preprocess(raw, opts);
        auto logits = model_forward(params, pre.image, RunMode::Eval);

        const int s = opts.out_size;
        ImageU8 mask;
        mask.width = mask.height = s;
        mask.channels = 3;
        mask.pixels.assign(static_cast<std::size_t>(s) * s * 3, 0);
        std::vector<float> p_fovea(static_cast<std::size_t>(s) * s), p_od(p_fovea.size());
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const float zf = logits->at(0, 0, y, x), zo = logits->at(0, 1, y, x);
                p_fovea[static_cast<std::size_t>(y) * s + x] = zf > 0 ? 1.f : 0.f;
                p_od[static_cast<std::size_t>(y) * s + x] = zo > 0 ? 1.f : 0.f;
                mask.at(y, x, 0) = zf > 0 ? 255 : 0; // fovea in red
                mask.at(y, x, 1) = zo > 0 ? 255 : 0; // OD in green
            }
        write_png((fs::path(out) / "predictions" / (raw.id + "_mask.png")).string(), mask);

        auto fmt = [&](std::optional<Centroid> c, float scale_axis_x, float scale_axis_y) {
            std::string sx, sy;
            if (c) {
                const double fx = basis == Basis::Original ? c->x * scale_axis_x : c->x;
                const double fy = basis == Basis::Original ? c->y * scale_axis_y : c->y;
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.2f", fx);
                sx = buf;
                std::snprintf(buf, sizeof(buf), "%.2f", fy);
                sy = buf;
            }
            return std::make_pair(sx, sy);
        };
        auto cf = extract_centroid(p_fovea.data(), s, s, 0.5f);
        auto co = extract_centroid(p_od.data(), s, s, 0.5f);
        auto [fx, fy] = fmt(cf, pre.scale_x, pre.scale_y);
        auto [ox, oy] = fmt(co, pre.scale_x, pre.scale_y);
        coords << raw.id << "," << fx << "," << fy << "," << ox << "," << oy << "\n";
        std::printf("%s: fovea (%s, %s)  od (%s, %s)\n", raw.id.c_str(), fx.c_str(), fy.c_str(),
                    ox.c_str(), oy.c_str());
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / synth
// ---------------------------------------------------------------------------

int cmd_gradcheck(int argc, char** argv) {
    Args args = parse_args(argc, argv, 2, {}, {});
    if (args.positional.size() != 1) throw UsageError("gradcheck needs exactly one scope: ops|hba|model");
    const std::string scope = args.positional[0];
    std::vector<GradTarget> targets;
    if (scope == "ops")
        targets = gradsuite_ops();
    else if (scope == "hba")
        targets = gradsuite_hba();
    else if (scope == "model")
        targets = gradsuite_model();
    else
        throw UsageError("unknown gradcheck scope '" + scope + "' (expected ops, hba or model)");

    std::printf("%-36s %12s %12s\n", "target", "f32 max rel", "f64 max rel");
    for (const auto& t : targets)
        std::printf("%-36s %12.3g %12.3g  %s\n", t.name.c_str(), t.err32, t.err64,
                    (t.err32 <= kGradTol32 && t.err64 <= kGradTol64) ? "ok" : "FAIL");
    if (!gradsuite_passed(targets)) {
        std::fprintf(stderr, "gradcheck: tolerance breach (f32 limit %g, f64 limit %g)\n", kGradTol32,
                     kGradTol64);
        return 1;
    }
    std::printf("gradcheck %s: all targets within tolerance\n", scope.c_str());
    return 0;
}

int cmd_synth(int argc, char** argv) {
    Args args = parse_args(argc, argv, 2, {"out", "count", "size", "disease-level", "seed"}, {});
    const std::string out = args.require("out");
    const int count = std::stoi(args.get("count", "16"));
    const int size = std::stoi(args.get("size", "128"));
    const double disease = std::stod(args.get("disease-level", "0.5"));
    const std::uint64_t seed = std::stoull(args.get("seed", "1"));
    auto samples = synth_fundus(count, size, disease, seed);
    write_dataset(out, samples);
    std::printf("wrote %d synthetic fundus images (%d^2, disease level %.2f) under %s\n", count, size,
                disease, out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        print_usage();
        return 2;
    }
    const std::string cmd = argv[1];
    try {
        if (cmd == "train") return cmd_train(argc, argv);
        if (cmd == "ablate") return cmd_ablate(argc, argv);
        if (cmd == "evaluate") return cmd_evaluate(argc, argv);
        if (cmd == "predict") return cmd_predict(argc, argv);
        if (cmd == "gradcheck") return cmd_gradcheck(argc, argv);
        if (cmd == "synth") return cmd_synth(argc, argv);
        std::fprintf(stderr, "unknown command '%s'\n", cmd.c_str());
        print_usage();
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        print_usage();
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
