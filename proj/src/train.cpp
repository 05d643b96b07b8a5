#include "hba/train.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "hba/serialize.hpp"

namespace hba {

namespace {
constexpr float kBeta1 = 0.9f;
constexpr float kBeta2 = 0.999f;
constexpr float kAdamEps = 1e-8f;
constexpr char kStateMagic[8] = {'H', 'B', 'A', 'S', 'T', 'A', 'T', '1'};
constexpr std::uint64_t kShuffleTag = 0x7368756666ULL; // "shuff"
constexpr std::uint64_t kAugmentTag = 0x61756774ULL;   // "augt"
} // namespace

void TrainConfig::validate() const {
    if (!(lr_start > 0)) throw ConfigError("train: lr_start must be > 0");
    if (!(lr_decay > 0) || lr_decay > 1) throw ConfigError("train: lr_decay must lie in (0,1]");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (decay_start_epoch < 0) throw ConfigError("train: decay_start_epoch must be >= 0");
    if (early_stop_patience < 0) throw ConfigError("train: early_stop_patience must be >= 0");
}

std::string TrainConfig::serialize() const {
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(lr_start));
    os << "lr_start=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(lr_decay));
    os << "lr_decay=" << buf << "\n"
       << "decay_start_epoch=" << decay_start_epoch << "\n"
       << "batch_size=" << batch_size << "\n"
       << "max_epochs=" << max_epochs << "\n"
       << "early_stop_patience=" << early_stop_patience << "\n";
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(dice_smooth));
    os << "dice_smooth=" << buf << "\n"
       << "seed=" << seed << "\n";
    return os.str();
}

TrainConfig TrainConfig::deserialize(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("train config: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    TrainConfig c;
    if (kv.count("lr_start")) c.lr_start = std::stof(kv["lr_start"]);
    if (kv.count("lr_decay")) c.lr_decay = std::stof(kv["lr_decay"]);
    if (kv.count("decay_start_epoch")) c.decay_start_epoch = std::stoi(kv["decay_start_epoch"]);
    if (kv.count("batch_size")) c.batch_size = std::stoi(kv["batch_size"]);
    if (kv.count("max_epochs")) c.max_epochs = std::stoi(kv["max_epochs"]);
    if (kv.count("early_stop_patience")) c.early_stop_patience = std::stoi(kv["early_stop_patience"]);
    if (kv.count("dice_smooth")) c.dice_smooth = std::stof(kv["dice_smooth"]);
    if (kv.count("seed")) c.seed = std::stoull(kv["seed"]);
    return c;
}

float lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
    if (epoch <= cfg.decay_start_epoch) return cfg.lr_start;
    return cfg.lr_start * std::pow(cfg.lr_decay, static_cast<float>(epoch - cfg.decay_start_epoch));
}

template <class Real>
TensorPtr<Real> dice_loss(const TensorPtr<Real>& logits, const TensorPtr<Real>& target, Real smooth) {
    return dice_loss_with_logits(logits, target, smooth);
}

template TensorPtr<float> dice_loss<float>(const TensorPtr<float>&, const TensorPtr<float>&, float);
template TensorPtr<double> dice_loss<double>(const TensorPtr<double>&, const TensorPtr<double>&, double);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

AdamState init_adam(const std::vector<NamedTensor<float>>& tensors) {
    AdamState s;
    for (const auto& nt : tensors) {
        if (!nt.learnable) continue;
        s.m.emplace_back(nt.tensor->data.size(), 0.f);
        s.v.emplace_back(nt.tensor->data.size(), 0.f);
    }
    return s;
}

void adam_step(std::vector<NamedTensor<float>>& tensors, AdamState& state, float lr) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(static_cast<double>(kBeta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(kBeta2), static_cast<double>(state.step));
    std::size_t slot = 0;
    for (auto& nt : tensors) {
        if (!nt.learnable) continue;
        auto& m = state.m.at(slot);
        auto& v = state.v.at(slot);
        ++slot;
        auto& t = *nt.tensor;
        if (t.grad.empty()) t.ensure_grad(); // zero gradient: moments still decay
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const float g = t.grad[i];
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in parameter '" + nt.name + "'");
            m[i] = kBeta1 * m[i] + (1.f - kBeta1) * g;
            v[i] = kBeta2 * v[i] + (1.f - kBeta2) * g * g;
            const float mhat = static_cast<float>(m[i] / bc1);
            const float vhat = static_cast<float>(v[i] / bc2);
            t.data[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

namespace {

// copy, augment, and stack samples into batch tensors
std::pair<TensorPtr<float>, TensorPtr<float>> make_batch(const std::vector<TrainSample>& samples,
                                                         const std::vector<int>& order,
                                                         std::size_t begin, std::size_t count,
                                                         std::uint64_t seed, int epoch, bool augmented) {
    const int s = samples[0].image->shape.h;
    auto images = make_tensor<float>({static_cast<int>(count), 3, s, s});
    auto targets = make_tensor<float>({static_cast<int>(count), 2, s, s});
    const std::int64_t plane = static_cast<std::int64_t>(s) * s;
    for (std::size_t b = 0; b < count; ++b) {
        const int idx = order[begin + b];
        const TrainSample& sample = samples[static_cast<std::size_t>(idx)];
        Tensor<float> img = *sample.image; // value copy
        TargetMask mask = sample.target;
        if (augmented) {
            Rng rng = Rng::derive(seed, {kAugmentTag, static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(idx)});
            augment(img, mask, rng);
        }
        std::memcpy(images->data.data() + images->shape.index(static_cast<int>(b), 0, 0, 0),
                    img.data.data(), img.data.size() * sizeof(float));
        float* tf = targets->data.data() + targets->shape.index(static_cast<int>(b), 0, 0, 0);
        float* to = tf + plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            tf[i] = mask.fovea[static_cast<std::size_t>(i)] ? 1.f : 0.f;
            to[i] = mask.od[static_cast<std::size_t>(i)] ? 1.f : 0.f;
        }
    }
    return {images, targets};
}

float mean_loss_eval(const ModelParams<float>& model, const std::vector<TrainSample>& samples,
                     const TrainConfig& cfg) {
    std::vector<int> order(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) order[i] = static_cast<int>(i);
    double total = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t count = std::min<std::size_t>(cfg.batch_size, samples.size() - begin);
        auto [images, targets] = make_batch(samples, order, begin, count, 0, 0, false);
        auto logits = model_forward(model, images, RunMode::Eval);
        auto loss = dice_loss_with_logits(logits, targets, cfg.dice_smooth);
        total += static_cast<double>(loss->data[0]) * static_cast<double>(count);
    }
    return static_cast<float>(total / static_cast<double>(samples.size()));
}

} // namespace

FitResult fit(ModelParams<float>& model, const std::vector<TrainSample>& train,
              const std::vector<TrainSample>& val, const TrainConfig& cfg, StopFn stop,
              TrainState* resume) {
    cfg.validate();
    if (train.empty() || val.empty()) throw ConfigError("fit: train and val sets must be non-empty");

    auto tensors = collect_tensors(model);
    TrainState local;
    TrainState& st = resume ? *resume : local;
    if (st.next_epoch == 0) {
        st.adam = init_adam(tensors);
        st.best = clone_model(model);
        st.best_epoch = -1;
        st.best_val = std::numeric_limits<float>::infinity();
        st.epochs_since_improvement = 0;
    } else {
        // continue from the live weights of the interrupted run
        auto live_src = collect_tensors(st.live);
        if (live_src.size() != tensors.size())
            throw ConfigError("fit: resume state does not match the model layout");
        for (std::size_t i = 0; i < tensors.size(); ++i)
            tensors[i].tensor->data = live_src[i].tensor->data;
    }

    FitResult result;
    for (int epoch = st.next_epoch; epoch < cfg.max_epochs; ++epoch) {
        const float lr = lr_at(epoch, cfg);

        std::vector<int> order(train.size());
        for (std::size_t i = 0; i < train.size(); ++i) order[i] = static_cast<int>(i);
        Rng shuffle_rng = Rng::derive(cfg.seed, {kShuffleTag, static_cast<std::uint64_t>(epoch)});
        for (std::size_t i = train.size() - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.bounded(i + 1)]);

        double train_total = 0;
        for (std::size_t begin = 0; begin < train.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t count = std::min<std::size_t>(cfg.batch_size, train.size() - begin);
            auto [images, targets] = make_batch(train, order, begin, count, cfg.seed, epoch, true);

            for (auto& nt : tensors)
                if (nt.learnable && !nt.tensor->grad.empty()) nt.tensor->zero_grad();

            Tape<float> tape;
            TensorPtr<float> loss;
            try {
                TapeScope<float> scope(tape);
                ForwardOpts opts;
                opts.update_running = true;
                auto logits = model_forward(model, images, RunMode::Train, opts);
                loss = dice_loss_with_logits(logits, targets, cfg.dice_smooth);
                tape.backward(loss);
            } catch (const NumericError& e) {
                throw NumericError("fit: epoch " + std::to_string(epoch) + ", batch at index " +
                                   std::to_string(begin) + ": " + e.what());
            }
            adam_step(tensors, st.adam, lr);
            train_total += static_cast<double>(loss->data[0]) * static_cast<double>(count);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.train_loss = static_cast<float>(train_total / static_cast<double>(train.size()));
        stats.val_loss = mean_loss_eval(model, val, cfg);
        result.history.push_back(stats);

        if (stats.val_loss < st.best_val) {
            st.best_val = stats.val_loss;
            st.best_epoch = epoch;
            st.best = clone_model(model);
            st.epochs_since_improvement = 0;
        } else {
            ++st.epochs_since_improvement;
        }
        st.next_epoch = epoch + 1;

        if (stop && stop(stats)) break;
        if (st.epochs_since_improvement > cfg.early_stop_patience) break;
    }

    // snapshot the live weights for resumption, then hand back the
    // best-validation weights (running stats included)
    st.live = clone_model(model);
    auto best_src = collect_tensors(st.best);
    auto dst = collect_tensors(model);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].tensor->data = best_src[i].tensor->data;
    result.best_epoch = st.best_epoch;
    result.best_val = st.best_val;
    return result;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open history for writing: " + path);
    os << "epoch,lr,train_loss,val_loss\n";
    char buf[160];
    for (const auto& h : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", h.epoch, static_cast<double>(h.lr),
                      static_cast<double>(h.train_loss), static_cast<double>(h.val_loss));
        os << buf;
    }
    if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// state sidecar
// ---------------------------------------------------------------------------

void save_train_state(const std::string& path, const TrainState& state,
                      const NetworkConfig& model_cfg) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open state for writing: " + path);
    bio::put_bytes(os, kStateMagic, sizeof(kStateMagic));
    bio::put<std::uint32_t>(os, 1);
    bio::put<std::uint64_t>(os, model_cfg.digest());
    bio::put<std::int32_t>(os, state.next_epoch);
    bio::put<std::int32_t>(os, state.best_epoch);
    bio::put<float>(os, state.best_val);
    bio::put<std::int32_t>(os, state.epochs_since_improvement);
    bio::put<std::int64_t>(os, state.adam.step);
    bio::put<std::uint32_t>(os, static_cast<std::uint32_t>(state.adam.m.size()));
    for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
        bio::put<std::uint32_t>(os, static_cast<std::uint32_t>(state.adam.m[i].size()));
        bio::put_f32_array(os, state.adam.m[i].data(), state.adam.m[i].size());
        bio::put_f32_array(os, state.adam.v[i].data(), state.adam.v[i].size());
    }
    for (const auto* snapshot : {&state.best, &state.live}) {
        auto tensors = collect_tensors(*snapshot);
        bio::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& nt : tensors) {
            bio::put<std::uint32_t>(os, static_cast<std::uint32_t>(nt.tensor->data.size()));
            bio::put_f32_array(os, nt.tensor->data.data(), nt.tensor->data.size());
        }
    }
    if (!os) throw IoError("write failed: " + path);
}

TrainState load_train_state(const std::string& path, const NetworkConfig& model_cfg) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open state: " + path);
    char magic[8];
    bio::get_bytes(is, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kStateMagic, sizeof(magic)) != 0)
        throw IoError("not a training-state file: " + path);
    if (bio::get<std::uint32_t>(is, "version") != 1) throw IoError("state version unsupported: " + path);
    if (bio::get<std::uint64_t>(is, "config digest") != model_cfg.digest())
        throw ConfigError("training state was written under a different model config");

    TrainState st;
    st.next_epoch = bio::get<std::int32_t>(is, "next_epoch");
    st.best_epoch = bio::get<std::int32_t>(is, "best_epoch");
    st.best_val = bio::get<float>(is, "best_val");
    st.epochs_since_improvement = bio::get<std::int32_t>(is, "since_improvement");
    st.adam.step = bio::get<std::int64_t>(is, "adam step");
    const auto slots = bio::get<std::uint32_t>(is, "adam slots");
    st.adam.m.resize(slots);
    st.adam.v.resize(slots);
    for (std::uint32_t i = 0; i < slots; ++i) {
        const auto n = bio::get<std::uint32_t>(is, "moment size");
        st.adam.m[i].resize(n);
        st.adam.v[i].resize(n);
        bio::get_f32_array(is, st.adam.m[i].data(), n, "adam m");
        bio::get_f32_array(is, st.adam.v[i].data(), n, "adam v");
    }
    st.best = build_model<float>(model_cfg, 0);
    st.live = build_model<float>(model_cfg, 0);
    for (auto* snapshot : {&st.best, &st.live}) {
        auto tensors = collect_tensors(*snapshot);
        const auto n_tensors = bio::get<std::uint32_t>(is, "snapshot tensor count");
        if (n_tensors != tensors.size()) throw IoError("state weights inventory mismatch: " + path);
        for (auto& nt : tensors) {
            const auto n = bio::get<std::uint32_t>(is, "tensor size");
            if (n != nt.tensor->data.size()) throw IoError("state tensor size mismatch: " + path);
            bio::get_f32_array(is, nt.tensor->data.data(), n, nt.name.c_str());
        }
    }
    return st;
}

} // namespace hba
