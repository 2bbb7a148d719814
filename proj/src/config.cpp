#include "cmsa/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cmsa/errors.hpp"
#include "json.hpp"

namespace cmsa {

using nlohmann::json;

namespace {

struct Reference {
    int channels;
    int blocks;
    std::vector<GroupSpec> groups;
};

struct Variant {
    int stem;
    std::vector<Reference> stages;
};

// Windows at a 32x24 first-stage map.
constexpr int kRefHeight = 32;
constexpr int kRefWidth = 24;

const Variant* find_variant(std::string_view name) {
    static const Variant s{96,
                           {{96, 2, {{32, 24, 32, 2}, {16, 12, 32, 2}, {8, 6, 16, 1}}},
                            {160, 4, {{16, 12, 48, 3}, {8, 6, 48, 3}}},
                            {224, 3, {{8, 6, 64, 4}, {8, 6, 64, 4}}}}};
    static const Variant b{128,
                           {{128, 2, {{32, 24, 16, 1}, {16, 12, 32, 2}, {8, 6, 16, 1}}},
                            {192, 4, {{16, 12, 48, 3}, {8, 6, 48, 3}}},
                            {256, 3, {{8, 6, 64, 4}, {8, 6, 80, 5}}}}};
    static const Variant l{128,
                           {{128, 2, {{32, 24, 16, 1}, {16, 12, 32, 2}, {8, 6, 16, 1}}},
                            {256, 4, {{16, 12, 48, 3}, {8, 6, 48, 3}}},
                            {320, 3, {{8, 6, 64, 4}, {8, 6, 64, 4}}}}};
    if (name == "S") return &s;
    if (name == "B") return &b;
    if (name == "L") return &l;
    return nullptr;
}

int scale_window(int ref, int actual, int reference, const std::string& field) {
    const long long scaled = static_cast<long long>(ref) * actual;
    if (scaled % reference != 0)
        throw ConfigError(field + ": window " + std::to_string(ref) + " does not scale to a " + std::to_string(actual) +
                          "-wide first stage");
    return static_cast<int>(scaled / reference);
}

// Typed access with field paths in every error.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <typename T>
    void read(const char* key, T& out) const {
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        const std::string field = sub(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(field + ": expected a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_unsigned() == false && v.get<long long>() < 0)
                    throw ConfigError(field + ": expected a non-negative integer");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(field + ": expected a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(field + ": expected a string");
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            if (!v.is_array()) throw ConfigError(field + ": expected an array of integers");
            for (const auto& e : v)
                if (!e.is_number_integer()) throw ConfigError(field + ": expected an array of integers");
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) throw ConfigError(field + ": expected an array of numbers");
            for (const auto& e : v)
                if (!e.is_number()) throw ConfigError(field + ": expected an array of numbers");
        }
        out = v.get<T>();
    }

    void reject_unknown(std::initializer_list<const char*> known) const {
        for (const auto& [k, _] : j_.items()) {
            bool ok = false;
            for (const char* n : known) ok = ok || k == n;
            if (!ok) throw ConfigError(sub(k.c_str()) + ": unknown field");
        }
    }

    Reader child(const char* key) const { return Reader(j_.at(key), sub(key)); }
    const json& raw(const char* key) const { return j_.at(key); }
    std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "<root>" : path_; }

private:
    const json& j_;
    std::string path_;
};

json groups_json(const CmsaConfig& c) {
    json arr = json::array();
    for (const auto& g : c.groups) arr.push_back({{"s", g.s}, {"t", g.t}, {"d", g.d}, {"heads", g.heads}});
    return arr;
}

json model_json(const ModelConfig& m) {
    json stages = json::array();
    for (const auto& s : m.stages) {
        const auto& a = s.attention;
        stages.push_back({{"channels", s.channels},
                          {"blocks", s.blocks},
                          {"attention",
                           {{"groups", groups_json(a)},
                            {"kv_halved", a.kv_halved},
                            {"value_double", a.value_double},
                            {"shifted_windows", a.shifted_windows},
                            {"ablation",
                             {{"grouped_attention", a.ablation.grouped_attention},
                              {"cascade", a.ablation.cascade},
                              {"spatial_fusion", a.ablation.spatial_fusion},
                              {"channel_fusion", a.ablation.channel_fusion}}}}}});
    }
    return {{"variant", m.variant},         {"image_height", m.image_height}, {"image_width", m.image_width},
            {"in_channels", m.in_channels}, {"stem_channels", m.stem_channels}, {"stem_stride", m.stem_stride},
            {"stages", stages},             {"ffn_ratio", m.ffn_ratio},       {"classes", m.classes}};
}

CmsaConfig parse_attention(const Reader& r) {
    r.reject_unknown({"groups", "kv_halved", "value_double", "shifted_windows", "ablation"});
    CmsaConfig c;
    if (!r.has("groups") || !r.raw("groups").is_array()) throw ConfigError(r.sub("groups") + ": expected an array");
    const auto& arr = r.raw("groups");
    for (std::size_t i = 0; i < arr.size(); ++i) {
        Reader g(arr[i], r.sub("groups") + "[" + std::to_string(i) + "]");
        g.reject_unknown({"s", "t", "d", "heads"});
        GroupSpec spec;
        for (auto [key, dst] : {std::pair{"s", &spec.s}, {"t", &spec.t}, {"d", &spec.d}, {"heads", &spec.heads}}) {
            if (!g.has(key)) throw ConfigError(g.sub(key) + ": required");
            g.read(key, *dst);
        }
        c.groups.push_back(spec);
    }
    r.read("kv_halved", c.kv_halved);
    r.read("value_double", c.value_double);
    r.read("shifted_windows", c.shifted_windows);
    if (r.has("ablation")) {
        const auto a = r.child("ablation");
        a.reject_unknown({"grouped_attention", "cascade", "spatial_fusion", "channel_fusion"});
        a.read("grouped_attention", c.ablation.grouped_attention);
        a.read("cascade", c.ablation.cascade);
        a.read("spatial_fusion", c.ablation.spatial_fusion);
        a.read("channel_fusion", c.ablation.channel_fusion);
    }
    return c;
}

ModelConfig parse_model(const Reader& r) {
    r.reject_unknown({"variant", "image_height", "image_width", "in_channels", "stem_channels", "stem_stride", "stages",
                      "ffn_ratio", "classes"});
    ModelConfig m;
    r.read("variant", m.variant);
    r.read("image_height", m.image_height);
    r.read("image_width", m.image_width);
    r.read("classes", m.classes);
    r.read("stem_stride", m.stem_stride);
    if (!r.has("stages")) {
        if (!find_variant(m.variant))
            throw ConfigError(r.sub("stages") + ": required unless variant is one of S, B, L");
        const ModelConfig base = variant_config(m.variant, m.image_height, m.image_width, m.classes, m.stem_stride);
        m.stages = base.stages;
        m.stem_channels = base.stem_channels;
    } else {
        if (!r.raw("stages").is_array()) throw ConfigError(r.sub("stages") + ": expected an array");
        const auto& arr = r.raw("stages");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            Reader s(arr[i], r.sub("stages") + "[" + std::to_string(i) + "]");
            s.reject_unknown({"channels", "blocks", "attention"});
            StageConfig st;
            s.read("channels", st.channels);
            s.read("blocks", st.blocks);
            if (!s.has("attention")) throw ConfigError(s.sub("attention") + ": required");
            st.attention = parse_attention(s.child("attention"));
            m.stages.push_back(std::move(st));
        }
    }
    r.read("in_channels", m.in_channels);
    r.read("stem_channels", m.stem_channels);
    r.read("ffn_ratio", m.ffn_ratio);
    return m;
}

json train_json(const TrainConfig& t) {
    const auto& s = t.schedule;
    return {{"dataset", t.dataset},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"micro_batch", t.micro_batch},
            {"eval_batch", t.eval_batch},
            {"weight_decay", t.weight_decay},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"label_smoothing", t.label_smoothing},
            {"schedule",
             {{"kind", s.kind == ScheduleKind::cosine ? "cosine" : "step"},
              {"lr_max", s.lr_max},
              {"lr_min", s.lr_min},
              {"warmup_epochs", s.warmup_epochs},
              {"milestones", s.milestones},
              {"decay", s.decay}}},
            {"crop_padding", t.crop_padding},
            {"horizontal_flip", t.horizontal_flip},
            {"mixup", t.mixup},
            {"random_erasing", t.random_erasing},
            {"mean", t.mean},
            {"std", t.std},
            {"subset", t.subset},
            {"stop_train_accuracy", t.stop_train_accuracy},
            {"checkpoint_every", t.checkpoint_every}};
}

TrainConfig parse_train(const Reader& r) {
    r.reject_unknown({"dataset", "epochs", "batch_size", "micro_batch", "eval_batch", "weight_decay", "beta1", "beta2",
                      "adam_eps", "label_smoothing", "schedule", "crop_padding", "horizontal_flip", "mixup",
                      "random_erasing", "mean", "std", "subset", "stop_train_accuracy", "checkpoint_every"});
    TrainConfig t;
    r.read("dataset", t.dataset);
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("micro_batch", t.micro_batch);
    r.read("eval_batch", t.eval_batch);
    r.read("weight_decay", t.weight_decay);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("adam_eps", t.adam_eps);
    r.read("label_smoothing", t.label_smoothing);
    if (r.has("schedule")) {
        const auto s = r.child("schedule");
        s.reject_unknown({"kind", "lr_max", "lr_min", "warmup_epochs", "milestones", "decay"});
        std::string kind = "cosine";
        s.read("kind", kind);
        if (kind == "cosine")
            t.schedule.kind = ScheduleKind::cosine;
        else if (kind == "step")
            t.schedule.kind = ScheduleKind::step;
        else
            throw ConfigError(s.sub("kind") + ": expected \"cosine\" or \"step\", got \"" + kind + "\"");
        s.read("lr_max", t.schedule.lr_max);
        s.read("lr_min", t.schedule.lr_min);
        s.read("warmup_epochs", t.schedule.warmup_epochs);
        s.read("milestones", t.schedule.milestones);
        s.read("decay", t.schedule.decay);
    }
    r.read("crop_padding", t.crop_padding);
    r.read("horizontal_flip", t.horizontal_flip);
    r.read("mixup", t.mixup);
    r.read("random_erasing", t.random_erasing);
    r.read("mean", t.mean);
    r.read("std", t.std);
    r.read("subset", t.subset);
    r.read("stop_train_accuracy", t.stop_train_accuracy);
    r.read("checkpoint_every", t.checkpoint_every);
    return t;
}

json parse_text(std::string_view text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
}

void rethrow_with_prefix(const std::string& prefix) {
    try {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(prefix + e.what());
    }
}

}  // namespace

std::pair<int, int> ModelConfig::stage_size(int i) const {
    const int h = image_height / stem_stride, w = image_width / stem_stride;
    return {h >> i, w >> i};
}

void ModelConfig::validate() const {
    if (stem_stride != 1 && stem_stride != 2 && stem_stride != 4)
        throw ConfigError("model.stem_stride: must be 1, 2 or 4, got " + std::to_string(stem_stride));
    if (in_channels <= 0) throw ConfigError("model.in_channels: must be positive");
    if (stem_channels <= 0) throw ConfigError("model.stem_channels: must be positive");
    if (ffn_ratio <= 0) throw ConfigError("model.ffn_ratio: must be positive");
    if (classes <= 1) throw ConfigError("model.classes: must be at least 2");
    if (stages.empty()) throw ConfigError("model.stages: at least one stage is required");
    if (stages[0].channels != stem_channels)
        throw ConfigError("model.stem_channels: must equal model.stages[0].channels (" +
                          std::to_string(stages[0].channels) + "), got " + std::to_string(stem_channels));
    const int down = stem_stride << (stages.size() - 1);
    if (image_height <= 0 || image_width <= 0 || image_height % down != 0 || image_width % down != 0) {
        throw ConfigError("model.image_height: input " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " is not divisible by the total downsampling " + std::to_string(down));
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const std::string field = "model.stages[" + std::to_string(i) + "]";
        const auto& s = stages[i];
        if (s.channels <= 0) throw ConfigError(field + ".channels: must be positive");
        if (s.blocks <= 0) throw ConfigError(field + ".blocks: must be positive");
        const auto [h, w] = stage_size(static_cast<int>(i));
        try {
            s.attention.validate(h, w);
        } catch (const ConfigError&) {
            rethrow_with_prefix(field + ".attention: ");
        }
    }
}

void TrainConfig::validate() const {
    if (dataset != "cifar10" && dataset != "cifar100")
        throw ConfigError("train.dataset: expected \"cifar10\" or \"cifar100\", got \"" + dataset + "\"");
    if (epochs <= 0) throw ConfigError("train.epochs: must be positive");
    if (batch_size <= 0) throw ConfigError("train.batch_size: must be positive");
    if (micro_batch <= 0) throw ConfigError("train.micro_batch: must be positive");
    if (eval_batch <= 0) throw ConfigError("train.eval_batch: must be positive");
    if (weight_decay < 0) throw ConfigError("train.weight_decay: must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1: betas must be in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("train.adam_eps: must be positive");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("train.label_smoothing: must be in [0, 1)");
    const auto& s = schedule;
    if (!(s.lr_max > 0) || !(s.lr_min >= 0) || s.lr_min > s.lr_max)
        throw ConfigError("train.schedule.lr_min: need 0 <= lr_min <= lr_max and lr_max > 0");
    if (s.warmup_epochs < 0 || s.warmup_epochs >= epochs)
        throw ConfigError("train.schedule.warmup_epochs: must be in [0, epochs), got " + std::to_string(s.warmup_epochs));
    if (s.kind == ScheduleKind::step) {
        if (s.milestones.empty()) throw ConfigError("train.schedule.milestones: required when kind is \"step\"");
        for (std::size_t i = 0; i < s.milestones.size(); ++i)
            if (s.milestones[i] <= 0 || (i > 0 && s.milestones[i] <= s.milestones[i - 1]))
                throw ConfigError("train.schedule.milestones: must be positive and strictly increasing");
        if (!(s.decay > 0 && s.decay <= 1)) throw ConfigError("train.schedule.decay: must be in (0, 1]");
    }
    if (crop_padding < 0) throw ConfigError("train.crop_padding: must be non-negative");
    if (mixup) throw ConfigError("train.mixup: not supported by this trainer");
    if (random_erasing) throw ConfigError("train.random_erasing: not supported by this trainer");
    if (mean.size() != 3) throw ConfigError("train.mean: expected 3 values");
    if (std.size() != 3) throw ConfigError("train.std: expected 3 values");
    for (double v : std)
        if (!(v > 0)) throw ConfigError("train.std: values must be positive");
    if (subset < 0) throw ConfigError("train.subset: must be non-negative");
    if (stop_train_accuracy < 0 || stop_train_accuracy > 1) throw ConfigError("train.stop_train_accuracy: must be in [0, 1]");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every: must be non-negative");
}

void RunConfig::validate() const {
    if (schema_version != kSchemaVersion)
        throw ConfigError("schema_version: expected " + std::to_string(kSchemaVersion) + ", got " +
                          std::to_string(schema_version));
    model.validate();
    train.validate();
    const int expected = train.dataset == "cifar10" ? 10 : 100;
    if (model.classes != expected)
        throw ConfigError("model.classes: " + train.dataset + " has " + std::to_string(expected) + " classes, config says " +
                          std::to_string(model.classes));
    if (model.in_channels != 3) throw ConfigError("model.in_channels: CIFAR images have 3 channels");
}

ModelConfig variant_config(std::string_view name, int image_height, int image_width, int classes, int stem_stride) {
    const Variant* v = find_variant(name);
    if (!v) throw ConfigError("model.variant: unknown variant \"" + std::string(name) + "\" (expected S, B or L)");
    if (stem_stride <= 0 || image_height % stem_stride != 0 || image_width % stem_stride != 0)
        throw ConfigError("model.stem_stride: input " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " is not divisible by " + std::to_string(stem_stride));
    ModelConfig m;
    m.variant = std::string(name);
    m.image_height = image_height;
    m.image_width = image_width;
    m.classes = classes;
    m.stem_stride = stem_stride;
    m.stem_channels = v->stem;
    const int h1 = image_height / stem_stride, w1 = image_width / stem_stride;
    for (std::size_t i = 0; i < v->stages.size(); ++i) {
        const auto& ref = v->stages[i];
        StageConfig st;
        st.channels = ref.channels;
        st.blocks = ref.blocks;
        st.attention.kv_halved = true;
        st.attention.value_double = true;
        for (std::size_t k = 0; k < ref.groups.size(); ++k) {
            const std::string field =
                "model.stages[" + std::to_string(i) + "].attention.groups[" + std::to_string(k) + "]";
            GroupSpec g = ref.groups[k];
            g.s = scale_window(g.s, h1, kRefHeight, field + ".s");
            g.t = scale_window(g.t, w1, kRefWidth, field + ".t");
            st.attention.groups.push_back(g);
        }
        m.stages.push_back(std::move(st));
    }
    return m;
}

RunConfig default_run_config(std::string_view variant) {
    RunConfig r;
    r.model = variant_config(variant);
    return r;
}

void apply_ablation(ModelConfig& config, const AblationFlags& flags) {
    for (auto& s : config.stages) s.attention.ablation = flags;
}

std::string to_json(const ModelConfig& config) { return model_json(config).dump(2); }

ModelConfig model_config_from_json(std::string_view text) {
    const json j = parse_text(text);
    return parse_model(Reader(j, "model"));
}

std::string to_json(const RunConfig& config) {
    json j{{"schema_version", config.schema_version},
           {"seed", config.seed},
           {"model", model_json(config.model)},
           {"train", train_json(config.train)}};
    return j.dump(2);
}

RunConfig run_config_from_json(std::string_view text) {
    const json j = parse_text(text);
    Reader r(j, "");
    r.reject_unknown({"schema_version", "seed", "model", "train"});
    RunConfig c;
    if (!r.has("schema_version")) throw ConfigError("schema_version: required");
    r.read("schema_version", c.schema_version);
    if (c.schema_version != kSchemaVersion)
        throw ConfigError("schema_version: expected " + std::to_string(kSchemaVersion) + ", got " +
                          std::to_string(c.schema_version));
    r.read("seed", c.seed);
    if (r.has("model")) c.model = parse_model(r.child("model"));
    else c.model = variant_config("S");
    if (r.has("train")) c.train = parse_train(r.child("train"));
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str());
}

std::uint64_t config_digest(const ModelConfig& config) {
    return fnv1a64(model_json(config).dump());
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace cmsa
