#include "cmsa/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cmsa/errors.hpp"

namespace cmsa {

RunConfig overfit_config(RunConfig base, int count) {
    if (count <= 0) throw ConfigError("overfit: sample count must be positive, got " + std::to_string(count));
    auto& t = base.train;
    t.subset = count;
    t.batch_size = count;
    t.micro_batch = std::min(t.micro_batch, count);
    t.eval_batch = std::min(t.eval_batch, count);
    t.crop_padding = 0;
    t.horizontal_flip = false;
    t.label_smoothing = 0.0;
    t.stop_train_accuracy = 0.95;
    return base;
}

std::vector<int> parse_rows(std::string_view text) {
    std::vector<int> rows;
    while (!text.empty()) {
        const auto comma = text.find(',');
        const auto item = text.substr(0, comma);
        int v = 0;
        const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc{} || end != item.data() + item.size() || v < 1 || v > 5)
            throw ConfigError("--rows: expected ids in 1..5 separated by commas, got \"" + std::string(item) + "\"");
        rows.push_back(v);
        if (comma == std::string_view::npos) break;
        text.remove_prefix(comma + 1);
    }
    if (rows.empty()) throw ConfigError("--rows: no rows given");
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    return rows;
}

std::vector<AblationResult> run_ablation(const RunConfig& config, const Dataset& train, const Dataset& val,
                                         const std::vector<int>& rows, const std::string& out_dir,
                                         const std::function<void(int, const EpochMetrics&)>& on_epoch) {
    std::vector<AblationResult> out;
    for (int row : rows) {
        AblationResult r;
        r.row = row;
        r.flags = AblationFlags::table_row(row);
        RunConfig rc = config;
        apply_ablation(rc.model, r.flags);
        RunOptions opts;
        if (!out_dir.empty()) {
            const auto dir = std::filesystem::path(out_dir) / ("row" + std::to_string(row));
            std::filesystem::create_directories(dir);
            std::ofstream cfg(dir / "config.json", std::ios::trunc);
            if (!(cfg << to_json(rc) << '\n')) throw IoError("cannot write " + (dir / "config.json").string());
            opts.out_dir = dir.string();
        }
        if (on_epoch) opts.on_epoch = [&](const EpochMetrics& m) { on_epoch(row, m); };
        r.run = run_training(rc, train, val, opts);
        r.params = parameter_count(r.run.state.model);
        out.push_back(std::move(r));
    }
    return out;
}

std::string ablation_row(const AblationResult& r) {
    const auto& f = r.flags;
    const EpochMetrics last = r.run.history.empty() ? EpochMetrics{} : r.run.history.back();
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,%d,%d,%lld,%lld,%.9g,%.9g,%.9g,%.9g", r.row, !f.grouped_attention,
                  f.grouped_attention, f.cascade, f.spatial_fusion, f.channel_fusion, static_cast<long long>(r.params),
                  static_cast<long long>(last.epoch), last.train_loss, last.train_acc, last.val_loss, last.val_acc);
    return buf;
}

}  // namespace cmsa
