#include <filesystem>
#include <fstream>
#include <iterator>

#include "cmsa/checkpoint.hpp"
#include "cmsa/errors.hpp"
#include "cmsa/trainer.hpp"
#include "doctest.h"
#include "tiny_run.hpp"

using namespace cmsa;
using cmsa::testing::fresh_dir;
using cmsa::testing::tiny_run_config;

namespace {

Checkpoint sample_checkpoint() {
    const auto rc = tiny_run_config();
    auto state = init_training(rc);
    state.epoch = 2;
    state.optim.step = 9;
    for (std::size_t i = 0; i < state.optim.m.size(); ++i) {
        for (auto& v : state.optim.m[i].data()) v = 0.25f;
        for (auto& v : state.optim.v[i].data()) v = 1e-7f;
    }
    return make_checkpoint(rc, state);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("checkpoint: save, load, save produces identical bytes") {
    const auto dir = fresh_dir("ckpt_roundtrip");
    std::filesystem::create_directories(dir);
    const auto a = dir + "/a.ckpt", b = dir + "/b.ckpt";
    const auto c = sample_checkpoint();
    save_checkpoint(a, c);
    const auto loaded = load_checkpoint(a, &c.config.model);
    save_checkpoint(b, loaded);
    CHECK(slurp(a) == slurp(b));
    CHECK(loaded.epoch == 2);
    CHECK(loaded.optim.step == 9);
    CHECK(loaded.config == c.config);
    CHECK(loaded.params.size() == c.params.size());
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        CHECK(loaded.params[i].name == c.params[i].name);
        CHECK(loaded.params[i].trainable == c.params[i].trainable);
        CHECK(loaded.params[i].value == c.params[i].value);
    }
    CHECK_FALSE(std::filesystem::exists(a + ".tmp"));
}

TEST_CASE("checkpoint: merged models round-trip their mode") {
    auto c = sample_checkpoint();
    const auto merged = reparameterize(Model{c.config.model, c.mode, c.params});
    c.mode = merged.mode;
    c.params = merged.params;
    c.optim = {};
    const auto back = parse_checkpoint(serialize_checkpoint(c));
    CHECK(back.mode == LayerMode::merged);
    CHECK(serialize_checkpoint(back) == serialize_checkpoint(c));
}

TEST_CASE("checkpoint: a different model configuration is a compatibility error") {
    const auto c = sample_checkpoint();
    const auto bytes = serialize_checkpoint(c);
    auto other = c.config.model;
    other.stages[1].channels = 32;
    CHECK_THROWS_AS(parse_checkpoint(bytes, &other), CompatibilityError);
    CHECK_NOTHROW(parse_checkpoint(bytes, &c.config.model));
}

TEST_CASE("checkpoint: truncation is an I/O error naming the offset") {
    const auto bytes = serialize_checkpoint(sample_checkpoint());
    for (std::size_t cut : {std::size_t{2}, std::size_t{13}, bytes.size() / 2, bytes.size() - 1}) {
        CAPTURE(cut);
        try {
            parse_checkpoint(std::string_view(bytes).substr(0, cut));
            FAIL("expected IoError");
        } catch (const IoError& e) {
            const std::string what = e.what();
            CHECK(what.find("offset") != std::string::npos);
            CHECK(what.find("file has " + std::to_string(cut)) != std::string::npos);
        }
    }
}

TEST_CASE("checkpoint: corrupt header and trailing bytes are data errors") {
    auto bytes = serialize_checkpoint(sample_checkpoint());
    CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), DataError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(bad_magic), DataError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(parse_checkpoint(bad_version), DataError);
}

TEST_CASE("checkpoint: missing file is an I/O error") {
    CHECK_THROWS_AS(load_checkpoint(fresh_dir("ckpt_missing") + "/none.ckpt"), IoError);
}
