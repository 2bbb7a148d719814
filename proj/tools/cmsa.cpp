#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmsa/checkpoint.hpp"
#include "cmsa/config.hpp"
#include "cmsa/data.hpp"
#include "cmsa/errors.hpp"
#include "cmsa/experiments.hpp"
#include "cmsa/network.hpp"
#include "cmsa/trainer.hpp"
#include "cmsa/verify.hpp"

using namespace cmsa;
namespace fs = std::filesystem;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct Options {
    std::string command;
    std::string config, data, out = "cmsa-out", resume, checkpoint, variant, dataset, kind = "all", rows = "1,2,3,4,5";
    std::optional<std::uint64_t> seed;
    int epochs = 0;
    int overfit = 0;
    int stop_after = 0;
    bool merged = false;
    std::string argv;
};

RunConfig resolve_config(const Options& o) {
    RunConfig rc = o.config.empty() ? default_run_config(o.variant.empty() ? "S" : o.variant) : load_run_config(o.config);
    if (!o.config.empty() && !o.variant.empty()) {
        const auto& m = rc.model;
        rc.model = variant_config(o.variant, m.image_height, m.image_width, m.classes, m.stem_stride);
    }
    if (!o.dataset.empty()) {
        cifar_kind(o.dataset);
        rc.train.dataset = o.dataset;
        const int classes = o.dataset == "cifar10" ? 10 : 100;
        if (rc.model.classes != classes) {
            const auto& m = rc.model;
            rc.model = m.variant == "custom" ? m : variant_config(m.variant, m.image_height, m.image_width, classes, m.stem_stride);
            rc.model.classes = classes;
        }
    }
    if (o.seed) rc.seed = *o.seed;
    if (o.overfit > 0) {
        rc = overfit_config(rc, o.overfit);
        if (o.epochs == 0) rc.train.epochs = 200;
    }
    if (o.epochs > 0) rc.train.epochs = o.epochs;
    auto& warmup = rc.train.schedule.warmup_epochs;
    if (warmup >= rc.train.epochs) {
        std::cerr << "note: warmup_epochs " << warmup << " reduced to " << rc.train.epochs - 1 << " for a "
                  << rc.train.epochs << "-epoch run\n";
        warmup = rc.train.epochs - 1;
    }
    rc.validate();
    return rc;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!(out << text)) throw IoError("cannot write " + path.string());
}

/// Key-value record of everything needed to replay the command; written before any compute.
void write_manifest(const Options& o, const std::optional<RunConfig>& rc, const std::vector<std::pair<std::string, std::string>>& extra) {
    fs::create_directories(o.out);
    std::ostringstream m;
    m << "tool=cmsa\nversion=" << kToolVersion << "\ncommand=" << o.command << "\nargv=" << o.argv << '\n';
    if (rc) {
        const fs::path cfg = fs::path(o.out) / "config.json";
        write_text(cfg, to_json(*rc) + "\n");
        m << "seed=" << rc->seed << "\nconfig=" << cfg.string() << "\nconfig_digest=" << hex64(config_digest(rc->model))
          << "\nrun_config_digest=" << hex64(fnv1a64(to_json(*rc))) << '\n';
    }
    for (const auto& [k, v] : extra) m << k << '=' << v << '\n';
    write_text(fs::path(o.out) / "manifest.txt", m.str());
}

std::string data_digest_of(const Options& o, const RunConfig& rc) {
    if (o.data.empty()) throw IoError("--data DIR is required for " + o.command);
    return hex64(dataset_digest(o.data, cifar_kind(rc.train.dataset)));
}

std::string group_list(const CmsaConfig& a) {
    std::ostringstream os;
    for (std::size_t i = 0; i < a.groups.size(); ++i) {
        const auto& g = a.groups[i];
        os << (i ? ";" : "") << g.s << 'x' << g.t << ":d" << g.d << ":h" << g.heads;
    }
    return os.str();
}

int cmd_info(const Options& o) {
    const RunConfig rc = resolve_config(o);
    write_manifest(o, rc, {});
    const auto& m = rc.model;
    std::cout << "variant=" << m.variant << " input=" << m.image_height << 'x' << m.image_width << 'x' << m.in_channels
              << " classes=" << m.classes << " stem_stride=" << m.stem_stride << " stem_channels=" << m.stem_channels
              << " ffn_ratio=" << m.ffn_ratio << '\n';
    for (std::size_t i = 0; i < m.stages.size(); ++i) {
        const auto& s = m.stages[i];
        const auto [h, w] = m.stage_size(static_cast<int>(i));
        std::cout << "stage=" << i + 1 << " size=" << h << 'x' << w << " channels=" << s.channels << " blocks=" << s.blocks
                  << " groups=" << group_list(s.attention) << " kv_halved=" << s.attention.kv_halved
                  << " value_double=" << s.attention.value_double << " ablation_row=" << s.attention.ablation.row() << '\n';
    }
    const Model model = build_model(m, substream_seed(rc.seed, "init"));
    std::cout << "params_training=" << parameter_count(model) << " params_merged=" << parameter_count(reparameterize(model))
              << '\n';
    return 0;
}

struct Splits {
    Dataset train, val;
};

Splits load_splits(const Options& o, const RunConfig& rc) {
    const auto kind = cifar_kind(rc.train.dataset);
    Splits s;
    s.train = read_cifar(o.data, kind, Split::train);
    if (o.overfit > 0) {
        s.val = take_subset(s.train, o.overfit);
    } else {
        s.val = read_cifar(o.data, kind, Split::test);
    }
    if (s.train.synthetic) std::cerr << "note: " << o.data << " is a synthetic fixture, not CIFAR\n";
    return s;
}

int cmd_train(const Options& o) {
    const RunConfig rc = resolve_config(o);
    const std::string digest = data_digest_of(o, rc);
    const fs::path out(o.out);
    write_manifest(o, rc,
                   {{"data_dir", o.data},
                    {"data_digest", digest},
                    {"overfit", std::to_string(o.overfit)},
                    {"resume", o.resume},
                    {"metrics", (out / "metrics.csv").string()},
                    {"checkpoint", (out / "checkpoint.ckpt").string()}});
    RunOptions opts;
    opts.out_dir = o.out;
    opts.stop_after = o.stop_after;
    if (!o.resume.empty()) opts.resume = load_checkpoint(o.resume, &rc.model);
    const auto data = load_splits(o, rc);
    std::cout << kMetricsHeader << '\n';
    opts.on_epoch = [](const EpochMetrics& m) { std::cout << metrics_row(m) << std::endl; };
    const auto r = run_training(rc, data.train, data.val, opts);
    const auto last = r.history.empty() ? EpochMetrics{} : r.history.back();
    std::cout << "result epochs=" << r.state.epoch << " train_acc=" << last.train_acc << " val_acc=" << last.val_acc
              << " stopped_early=" << r.stopped_early << '\n';
    return 0;
}

int cmd_eval(const Options& o) {
    const std::string path = o.checkpoint.empty() ? o.resume : o.checkpoint;
    if (path.empty()) throw UsageError("eval: --checkpoint PATH is required");
    write_manifest(o, std::nullopt, {{"checkpoint", path}, {"data_dir", o.data}, {"merged", std::to_string(o.merged)}});
    const Checkpoint c = load_checkpoint(path);
    const auto kind = cifar_kind(c.config.train.dataset);
    if (o.data.empty()) throw IoError("--data DIR is required for eval");
    const Dataset test = read_cifar(o.data, kind, Split::test);
    Model model{c.config.model, c.mode, c.params};
    if (o.merged && model.mode == LayerMode::training) model = reparameterize(model);
    const auto r = evaluate(model, test, c.config.train.eval_batch, c.config.train);
    std::cout << "accuracy=" << r.accuracy << " loss=" << r.loss << " count=" << r.count
              << " mode=" << (model.mode == LayerMode::merged ? "merged" : "training") << '\n';
    return 0;
}

int cmd_verify(const Options& o) {
    const RunConfig rc = resolve_config(o);
    static const std::vector<std::string> kinds{"all", "counts", "gradcheck", "reparam", "oracle", "invariants"};
    if (std::find(kinds.begin(), kinds.end(), o.kind) == kinds.end())
        throw UsageError("--kind: expected one of all, counts, gradcheck, reparam, oracle, invariants");
    write_manifest(o, rc, {{"kind", o.kind}, {"report", (fs::path(o.out) / "verify.txt").string()}});
    const auto want = [&](const char* k) { return o.kind == "all" || o.kind == k; };
    const std::string variant = rc.model.variant == "custom" ? "S" : rc.model.variant;
    const std::uint64_t seed = rc.seed;
    std::ofstream report(fs::path(o.out) / "verify.txt", std::ios::trunc);
    bool ok = true;
    const auto emit = [&](const CheckResult& r) {
        const auto line = format_record(r);
        std::cout << line << std::endl;
        report << line << '\n';
        ok = ok && r.pass;
    };
    if (want("counts")) emit(check_parameter_counts());
    if (want("reparam")) {
        emit(check_reparam_layers(variant, 100, seed));
        emit(check_reparam_end_to_end(variant, 10, seed));
    }
    if (want("gradcheck")) {
        emit(check_primitive_gradients(seed));
        emit(check_block_gradients(seed));
    }
    if (want("oracle")) {
        emit(check_dense_attention_oracle(seed));
        emit(check_window_attention_oracle(seed));
    }
    if (want("invariants")) {
        emit(check_window_round_trip(seed));
        emit(check_cascade_causality(seed));
        emit(check_shape_preservation(seed));
    }
    const std::string summary = std::string("summary verdict=") + (ok ? "pass" : "fail");
    std::cout << summary << '\n';
    report << summary << '\n';
    return ok ? 0 : static_cast<int>(ExitCode::verification);
}

int cmd_ablate(const Options& o) {
    const RunConfig rc = resolve_config(o);
    const auto rows = parse_rows(o.rows);
    const std::string digest = data_digest_of(o, rc);
    std::string row_list;
    for (int r : rows) row_list += (row_list.empty() ? "" : ",") + std::to_string(r);
    write_manifest(o, rc,
                   {{"data_dir", o.data},
                    {"data_digest", digest},
                    {"overfit", std::to_string(o.overfit)},
                    {"rows", row_list},
                    {"table", (fs::path(o.out) / "ablation.csv").string()}});
    const auto data = load_splits(o, rc);
    const auto results = run_ablation(rc, data.train, data.val, rows, o.out, [](int row, const EpochMetrics& m) {
        std::cout << "row=" << row << ' ' << metrics_row(m) << std::endl;
    });
    std::ostringstream table;
    table << kAblationHeader << '\n';
    for (const auto& r : results) table << ablation_row(r) << '\n';
    write_text(fs::path(o.out) / "ablation.csv", table.str());
    std::cout << table.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    retain_freed_memory();
    Options o;
    for (int i = 0; i < argc; ++i) o.argv += (i ? " " : "") + std::string(argv[i]);

    CLI::App app{"CMSA backbone: inspect, train, evaluate, verify and ablate"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    const auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--variant", o.variant, "Built-in variant")->check(CLI::IsMember({"S", "B", "L"}));
        sub->add_option("--dataset", o.dataset, "Dataset override")->check(CLI::IsMember({"cifar10", "cifar100"}));
        sub->add_option("--seed", o.seed, "Run seed");
        sub->add_option("--out", o.out, "Output directory (manifest, metrics, checkpoints)")->capture_default_str();
    };
    const auto training = [&](CLI::App* sub) {
        sub->add_option("--data", o.data, "CIFAR binary directory");
        sub->add_option("--epochs", o.epochs, "Epoch budget")->check(CLI::PositiveNumber);
        sub->add_option("--overfit", o.overfit, "Memorize the first N training images")->check(CLI::PositiveNumber);
    };

    auto* info = app.add_subcommand("info", "Print the model summary and parameter counts");
    common(info);
    auto* train = app.add_subcommand("train", "Train a model");
    common(train);
    training(train);
    train->add_option("--resume", o.resume, "Resume from a checkpoint")->check(CLI::ExistingFile);
    train->add_option("--stop-after", o.stop_after, "Stop after N epochs of this invocation (checkpoint kept)")
        ->check(CLI::PositiveNumber);
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    eval->add_option("--checkpoint,--resume", o.checkpoint, "Checkpoint to evaluate")->check(CLI::ExistingFile);
    eval->add_option("--data", o.data, "CIFAR binary directory");
    eval->add_option("--out", o.out, "Output directory for the manifest")->capture_default_str();
    eval->add_flag("--merged", o.merged, "Reparameterize before evaluating");
    auto* verify = app.add_subcommand("verify", "Run self-checks and print a key=value report");
    common(verify);
    verify->add_option("--kind", o.kind, "all, counts, gradcheck, reparam, oracle or invariants")->capture_default_str();
    auto* reparam = app.add_subcommand("reparam-check", "Merged against branched equivalence (verify --kind reparam)");
    common(reparam);
    auto* ablate = app.add_subcommand("ablate", "Seed-paired ablation sweep over attention components");
    common(ablate);
    training(ablate);
    ablate->add_option("--rows", o.rows, "Row ids 1..5, comma separated")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::config);
    }

    o.command = app.get_subcommands().front()->get_name();
    try {
        if (info->parsed()) return cmd_info(o);
        if (train->parsed()) return cmd_train(o);
        if (eval->parsed()) return cmd_eval(o);
        if (verify->parsed()) return cmd_verify(o);
        if (reparam->parsed()) {
            o.kind = "reparam";
            return cmd_verify(o);
        }
        if (ablate->parsed()) return cmd_ablate(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::data);
    }
    return 1;
}
