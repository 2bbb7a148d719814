#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "cmsa/config.hpp"
#include "cmsa/data.hpp"
#include "doctest.h"
#include "tiny_run.hpp"

using namespace cmsa;
using cmsa::testing::fresh_dir;
using cmsa::testing::tiny_dataset;
using cmsa::testing::tiny_run_config;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(CMSA_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf;
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string write_config(const std::string& name, const RunConfig& rc) {
    const auto dir = fresh_dir("cli_cfg_" + name);
    fs::create_directories(dir);
    const auto path = dir + "/config.json";
    std::ofstream(path) << to_json(rc);
    return path;
}

std::int64_t field(const std::string& text, const std::string& key) {
    const auto pos = text.find(key + "=");
    REQUIRE(pos != std::string::npos);
    return std::stoll(text.substr(pos + key.size() + 1));
}

const std::string& tiny_data() {
    static const std::string dir = tiny_dataset("cli");
    return dir;
}

const std::string& tiny_config() {
    static const std::string path = write_config("tiny", tiny_run_config());
    return path;
}

}  // namespace

TEST_CASE("info reports per-stage shapes and both parameter counts") {
    const auto out = fresh_dir("cli_info");
    const auto r = run("info --variant B --out " + out);
    CHECK(r.code == 0);
    CHECK(r.output.find("variant=B") != std::string::npos);
    CHECK(r.output.find("stage=3 size=8x8") != std::string::npos);
    const auto training = field(r.output, "params_training");
    CHECK(training == doctest::Approx(5.7e6).epsilon(0.1));
    CHECK(field(r.output, "params_merged") < training);
    CHECK(fs::exists(fs::path(out) / "manifest.txt"));
    CHECK(fs::exists(fs::path(out) / "config.json"));
}

TEST_CASE("a window that does not tile its stage exits with a config error") {
    auto rc = tiny_run_config();
    rc.model.stages[0].attention.groups[1].s = 3;
    const auto r = run("info --config " + write_config("bad_window", rc) + " --out " + fresh_dir("cli_bad"));
    CHECK(r.code == 2);
    CHECK(r.output.find("window does not tile stage") != std::string::npos);
    CHECK(r.output.find("model.stages[0]") != std::string::npos);
}

TEST_CASE("unknown flags are a usage error") {
    CHECK(run("info --no-such-flag").code == 2);
    CHECK(run("").code == 2);
}

TEST_CASE("missing data exits with a data error") {
    const auto r = run("train --config " + tiny_config() + " --data " + fresh_dir("cli_nodata") + " --out " +
                       fresh_dir("cli_nodata_out"));
    CHECK(r.code == 3);
}

TEST_CASE("train writes the manifest, metrics and checkpoint and is reproducible") {
    const auto a = fresh_dir("cli_train_a"), b = fresh_dir("cli_train_b");
    const std::string args = "train --config " + tiny_config() + " --data " + tiny_data() + " --seed 3 --out ";
    const auto ra = run(args + a);
    REQUIRE(ra.code == 0);
    REQUIRE(run(args + b).code == 0);
    const auto manifest = slurp(fs::path(a) / "manifest.txt");
    CHECK(manifest.find("command=train") != std::string::npos);
    CHECK(manifest.find("seed=3") != std::string::npos);
    CHECK(manifest.find("data_digest=") != std::string::npos);
    CHECK(slurp(fs::path(a) / "metrics.csv") == slurp(fs::path(b) / "metrics.csv"));
    CHECK(slurp(fs::path(a) / "checkpoint.ckpt") == slurp(fs::path(b) / "checkpoint.ckpt"));
    CHECK(ra.output.find("result epochs=3") != std::string::npos);

    // the manifest's config replays the run
    const auto c = fresh_dir("cli_train_replay");
    REQUIRE(run("train --config " + (fs::path(a) / "config.json").string() + " --data " + tiny_data() + " --out " + c)
                .code == 0);
    CHECK(slurp(fs::path(a) / "metrics.csv") == slurp(fs::path(c) / "metrics.csv"));

    SUBCASE("an interrupted run resumed from its checkpoint matches the unbroken run") {
        const auto p = fresh_dir("cli_train_part");
        REQUIRE(run(args + p + " --stop-after 1").code == 0);
        const auto r = run(args + p + " --resume " + (fs::path(p) / "checkpoint.ckpt").string());
        REQUIRE(r.code == 0);
        CHECK(slurp(fs::path(a) / "metrics.csv") == slurp(fs::path(p) / "metrics.csv"));
        CHECK(slurp(fs::path(a) / "checkpoint.ckpt") == slurp(fs::path(p) / "checkpoint.ckpt"));
    }

    SUBCASE("eval reads the checkpoint, branched or merged") {
        const auto ckpt = (fs::path(a) / "checkpoint.ckpt").string();
        const auto e1 = run("eval --checkpoint " + ckpt + " --data " + tiny_data() + " --out " + fresh_dir("cli_eval1"));
        const auto e2 =
            run("eval --merged --checkpoint " + ckpt + " --data " + tiny_data() + " --out " + fresh_dir("cli_eval2"));
        REQUIRE(e1.code == 0);
        REQUIRE(e2.code == 0);
        CHECK(e1.output.find("count=16") != std::string::npos);
        CHECK(e2.output.find("mode=merged") != std::string::npos);
        const auto acc = [](const std::string& s) { return s.substr(s.find("accuracy="), s.find(" loss=") - s.find("accuracy=")); };
        CHECK(acc(e1.output) == acc(e2.output));
    }
}

TEST_CASE("resuming a checkpoint of another model is a config error") {
    const auto a = fresh_dir("cli_compat");
    REQUIRE(run("train --config " + tiny_config() + " --data " + tiny_data() + " --epochs 2 --stop-after 1 --out " + a)
                .code == 0);
    auto other = tiny_run_config();
    other.model.stages[1].channels = 32;
    const auto r = run("train --config " + write_config("other", other) + " --data " + tiny_data() + " --out " +
                       fresh_dir("cli_compat2") + " --resume " + a + "/checkpoint.ckpt");
    CHECK(r.code == 2);
}

TEST_CASE("a diverging run exits with a numeric error and diagnostics") {
    auto rc = tiny_run_config();
    rc.train.schedule.lr_max = 1e30;
    rc.train.schedule.warmup_epochs = 0;
    rc.train.weight_decay = 0;
    const auto r =
        run("train --config " + write_config("diverge", rc) + " --data " + tiny_data() + " --out " + fresh_dir("cli_nan"));
    CHECK(r.code == 4);
    CHECK(r.output.find("non-finite") != std::string::npos);
}

TEST_CASE("overfit mode memorizes a small subset and stops early") {
    const auto out = fresh_dir("cli_overfit");
    auto rc = tiny_run_config();
    rc.train.schedule.lr_max = 1e-2;
    const auto r = run("train --config " + write_config("overfit", rc) + " --data " + tiny_data() +
                       " --overfit 16 --epochs 150 --out " + out);
    REQUIRE(r.code == 0);
    CHECK(r.output.find("stopped_early=1") != std::string::npos);
    CHECK(slurp(fs::path(out) / "manifest.txt").find("overfit=16") != std::string::npos);
}

TEST_CASE("verify prints key=value records and fails with exit code 5 only on failure") {
    const auto r = run("verify --kind oracle --out " + fresh_dir("cli_verify"));
    CHECK(r.code == 0);
    CHECK(r.output.find("check=dense_attention_oracle") != std::string::npos);
    CHECK(r.output.find("verdict=fail") == std::string::npos);
    CHECK(r.output.find("summary verdict=pass") != std::string::npos);
    CHECK(run("verify --kind nonsense --out " + fresh_dir("cli_verify2")).code == 2);
}

TEST_CASE("ablate emits rows in table order with seed-paired configs") {
    const auto out = fresh_dir("cli_ablate");
    const auto r = run("ablate --config " + tiny_config() + " --data " + tiny_data() + " --rows 5,1 --epochs 2 --out " + out);
    REQUIRE(r.code == 0);
    const auto table = slurp(fs::path(out) / "ablation.csv");
    std::istringstream lines(table);
    std::string header, first, second;
    std::getline(lines, header);
    std::getline(lines, first);
    std::getline(lines, second);
    CHECK(first.rfind("1,1,0,0,0,0,", 0) == 0);
    CHECK(second.rfind("5,0,1,1,1,1,", 0) == 0);

    auto c1 = run_config_from_json(slurp(fs::path(out) / "row1" / "config.json"));
    const auto c5 = run_config_from_json(slurp(fs::path(out) / "row5" / "config.json"));
    CHECK_FALSE(c1 == c5);
    for (auto& s : c1.model.stages) s.attention.ablation = c5.model.stages[0].attention.ablation;
    CHECK(c1 == c5);
    CHECK(run("ablate --config " + tiny_config() + " --data " + tiny_data() + " --rows 0,6 --out " + out).code == 2);
}
