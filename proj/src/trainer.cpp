#include "cmsa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"

namespace cmsa {

namespace fs = std::filesystem;

namespace {

std::int64_t argmax_row(const float* row, std::int64_t k) {
    return std::max_element(row, row + k) - row;
}

std::vector<Image> gather(const Dataset& data, std::span<const std::int64_t> idx) {
    std::vector<Image> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(data.images[static_cast<std::size_t>(i)]);
    return out;
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::int64_t> idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(data.labels[static_cast<std::size_t>(i)]);
    return out;
}

std::int64_t steps_per_epoch(std::int64_t samples, int batch) { return (samples + batch - 1) / batch; }

std::vector<std::string> kept_metric_rows(const fs::path& path, std::int64_t epochs) {
    std::vector<std::string> rows;
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) return rows;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) break;
        if (std::stoll(line.substr(0, comma)) > epochs) break;
        rows.push_back(line);
    }
    return rows;
}

}  // namespace

std::uint64_t substream_seed(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    std::uint64_t h = fnv1a64(name);
    for (std::uint64_t v : {seed, index}) {
        // splitmix64 finalizer over the running value
        std::uint64_t z = h ^ (v + 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        h = z ^ (z >> 31);
    }
    return h;
}

EvalResult evaluate(const Model& model, const Dataset& data, int batch, const TrainConfig& config) {
    if (batch <= 0) throw UsageError("evaluate: batch must be positive");
    EvalResult r;
    std::int64_t correct = 0;
    double loss_sum = 0.0;
    ParamStore<float> params = model.params;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].trainable = false;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(data.size()));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::int64_t start = 0; start < data.size(); start += batch) {
        const auto n = std::min<std::int64_t>(batch, data.size() - start);
        const std::span<const std::int64_t> part(idx.data() + start, static_cast<std::size_t>(n));
        const auto images = gather(data, part);
        const auto labels = gather_labels(data, part);
        Graph<float> g;
        Binder<float> p(g, params);
        const auto logits = forward(g.constant(to_batch(images, config.mean, config.std)), p, model.config,
                                    ForwardOptions{model.mode, false});
        const auto loss = cross_entropy_smoothed(logits, std::span<const int>(labels), 0.0);
        loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(n);
        const auto k = logits.value().dim(1);
        for (std::int64_t i = 0; i < n; ++i)
            if (argmax_row(logits.value().ptr() + i * k, k) == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    r.count = data.size();
    if (r.count > 0) {
        r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
        r.loss = loss_sum / static_cast<double>(r.count);
    }
    return r;
}

TrainState init_training(const RunConfig& config) {
    config.validate();
    TrainState s;
    s.model = build_model(config.model, substream_seed(config.seed, "init"));
    s.optim = init_optim_state(s.model.params);
    return s;
}

Checkpoint make_checkpoint(const RunConfig& config, const TrainState& state) {
    return Checkpoint{config, state.model.mode, state.model.params, state.optim, state.epoch};
}

TrainState state_from_checkpoint(const Checkpoint& c) {
    TrainState s;
    s.model = Model{c.config.model, c.mode, c.params};
    s.optim = c.optim;
    s.epoch = c.epoch;
    return s;
}

EpochResult train_epoch(TrainState& state, const Dataset& data, const RunConfig& config, const Schedule& schedule) {
    const auto& tc = config.train;
    if (state.model.mode != LayerMode::training) throw UsageError("train_epoch: model is in merged mode");
    if (data.size() == 0) throw DataError("train_epoch: empty training set");
    const auto epoch = static_cast<std::uint64_t>(state.epoch);

    std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(substream_seed(config.seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::mt19937_64 augment_rng(substream_seed(config.seed, "augment", epoch));

    EpochResult r;
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    const std::int64_t batches = steps_per_epoch(data.size(), tc.batch_size);
    for (std::int64_t b = 0; b < batches; ++b) {
        const std::int64_t start = b * tc.batch_size;
        const std::int64_t n = std::min<std::int64_t>(tc.batch_size, data.size() - start);
        const double lr = lr_at(state.optim.step, schedule);
        state.model.params.zero_grads();
        for (std::int64_t ms = 0; ms < n; ms += tc.micro_batch) {
            const std::int64_t mn = std::min<std::int64_t>(tc.micro_batch, n - ms);
            const std::span<const std::int64_t> part(order.data() + start + ms, static_cast<std::size_t>(mn));
            auto images = gather(data, part);
            for (auto& img : images)
                img = augment(img, augment_rng, tc.crop_padding, tc.horizontal_flip);
            const auto labels = gather_labels(data, part);

            Graph<float> g;
            Binder<float> p(g, state.model.params);
            const auto logits = forward(g.constant(to_batch(images, tc.mean, tc.std)), p, state.model.config,
                                        ForwardOptions{LayerMode::training, true});
            const auto loss = cross_entropy_smoothed(logits, std::span<const int>(labels), tc.label_smoothing);
            const double value = loss.value()[0];
            if (!std::isfinite(value)) {
                std::ostringstream os;
                os << "non-finite loss at epoch " << state.epoch + 1 << " batch " << b << " (lr=" << lr << ")";
                throw NumericError(os.str());
            }
            loss_sum += value * static_cast<double>(mn);
            const auto k = logits.value().dim(1);
            for (std::int64_t i = 0; i < mn; ++i)
                if (argmax_row(logits.value().ptr() + i * k, k) == labels[static_cast<std::size_t>(i)]) ++correct;
            g.backward(scale(loss, static_cast<double>(mn) / static_cast<double>(n)), true);
            g.accumulate_parameter_grads();
        }
        adamw_step(state.model.params, state.optim, lr, {tc.weight_decay, tc.beta1, tc.beta2, tc.adam_eps});
        r.lr = lr;
    }
    ++state.epoch;
    r.loss = loss_sum / static_cast<double>(data.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return r;
}

std::string metrics_row(const EpochMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(m.epoch), m.lr, m.train_loss,
                  m.train_acc, m.val_loss, m.val_acc);
    return buf;
}

Dataset take_subset(const Dataset& data, std::int64_t count) {
    if (count <= 0 || count >= data.size()) return data;
    Dataset out;
    out.classes = data.classes;
    out.synthetic = data.synthetic;
    out.images.assign(data.images.begin(), data.images.begin() + count);
    out.labels.assign(data.labels.begin(), data.labels.begin() + count);
    return out;
}

RunResult run_training(const RunConfig& config, const Dataset& full_train, const Dataset& val, const RunOptions& options) {
    config.validate();
    const auto& tc = config.train;
    Dataset subset;
    if (tc.subset > 0 && tc.subset < full_train.size()) subset = take_subset(full_train, tc.subset);
    const Dataset& train = subset.size() > 0 ? subset : full_train;
    if (train.classes != config.model.classes)
        throw ConfigError("model.classes: " + std::to_string(config.model.classes) + " but the dataset has " +
                          std::to_string(train.classes));
    RunResult result;
    if (options.resume) {
        if (config_digest(options.resume->config.model) != config_digest(config.model))
            throw CompatibilityError("resume: checkpoint was written for a different model configuration");
        result.state = state_from_checkpoint(*options.resume);
    } else {
        result.state = init_training(config);
    }
    auto& state = result.state;
    const Schedule schedule = make_schedule(tc.schedule, tc.epochs, steps_per_epoch(train.size(), tc.batch_size));

    std::ofstream csv;
    fs::path csv_path, ckpt_path;
    if (!options.out_dir.empty()) {
        fs::create_directories(options.out_dir);
        csv_path = fs::path(options.out_dir) / "metrics.csv";
        ckpt_path = fs::path(options.out_dir) / "checkpoint.ckpt";
        const auto kept = options.resume ? kept_metric_rows(csv_path, state.epoch) : std::vector<std::string>{};
        csv.open(csv_path, std::ios::trunc);
        if (!csv) throw IoError("cannot write " + csv_path.string());
        csv << kMetricsHeader << '\n';
        for (const auto& row : kept) csv << row << '\n';
        csv.flush();
    }

    std::int64_t ran = 0;
    while (state.epoch < tc.epochs) {
        const auto er = train_epoch(state, train, config, schedule);
        const auto ev = evaluate(state.model, val, tc.eval_batch, tc);
        const EpochMetrics m{state.epoch, er.lr, er.loss, er.accuracy, ev.loss, ev.accuracy};
        result.history.push_back(m);
        if (csv.is_open()) {
            csv << metrics_row(m) << '\n';
            csv.flush();
        }
        const bool stop = tc.stop_train_accuracy > 0 && er.accuracy > tc.stop_train_accuracy;
        const bool paused = options.stop_after > 0 && ++ran == options.stop_after;
        const bool last = stop || paused || state.epoch == tc.epochs;
        if (!ckpt_path.empty() && (last || state.epoch % tc.checkpoint_every == 0))
            save_checkpoint(ckpt_path.string(), make_checkpoint(config, state));
        if (options.on_epoch) options.on_epoch(m);
        if (stop) {
            result.stopped_early = true;
            break;
        }
        if (paused) break;
    }
    return result;
}

}  // namespace cmsa
