#include "cmsa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

#include "cmsa/errors.hpp"

namespace cmsa {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void bytes(std::string_view s) { out_.append(s); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }
    void record(const std::string& name, const Tensor& t, bool trainable) {
        str(name);
        u8(trainable ? 1 : 0);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) u64(static_cast<std::uint64_t>(d));
        for (float v : t.data()) u32(std::bit_cast<std::uint32_t>(v));
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint32_t u32() {
        const auto s = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        const auto s = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
        return v;
    }
    std::string str() { return std::string(take(u32())); }

    struct Record {
        std::string name;
        bool trainable;
        Tensor value;
    };
    Record record() {
        Record r;
        r.name = str();
        r.trainable = u8() != 0;
        const std::uint32_t rank = u32();
        if (rank > 8) throw DataError("checkpoint: record '" + r.name + "' has rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint64_t d = u64();
            if (d == 0 || d > (std::uint64_t{1} << 32))
                throw DataError("checkpoint: record '" + r.name + "' has dimension " + std::to_string(d));
            shape.push_back(static_cast<std::int64_t>(d));
            if (count > std::numeric_limits<std::uint64_t>::max() / 4 / d)
                throw DataError("checkpoint: record '" + r.name + "' is too large");
            count *= d;
        }
        if (count > (in_.size() - pos_) / 4) truncated(count * 4);
        r.value = Tensor(shape);
        for (auto& v : r.value.data()) v = std::bit_cast<float>(u32());
        return r;
    }

    std::size_t offset() const { return pos_; }
    bool done() const { return pos_ == in_.size(); }

private:
    std::string_view take(std::uint64_t n) {
        if (n > in_.size() - pos_) truncated(n);
        const auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    [[noreturn]] void truncated(std::uint64_t n) const {
        throw IoError("truncated checkpoint: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                      ", file has " + std::to_string(in_.size()));
    }

    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
    Writer w;
    w.bytes("CMSA");
    w.u32(kCheckpointVersion);
    w.u64(config_digest(c.config.model));
    w.u8(c.mode == LayerMode::merged ? 1 : 0);
    w.u64(static_cast<std::uint64_t>(c.epoch));
    w.str(to_json(c.config));
    w.u32(static_cast<std::uint32_t>(c.params.size()));
    for (std::size_t i = 0; i < c.params.size(); ++i) w.record(c.params[i].name, c.params[i].value, c.params[i].trainable);
    w.u64(static_cast<std::uint64_t>(c.optim.step));
    w.u32(static_cast<std::uint32_t>(c.optim.names.size()));
    for (std::size_t i = 0; i < c.optim.names.size(); ++i) {
        w.record(c.optim.names[i], c.optim.m[i], true);
        w.record(c.optim.names[i], c.optim.v[i], true);
    }
    return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected) {
    Reader r(bytes);
    if (bytes.size() >= 4 && bytes.substr(0, 4) != "CMSA") throw DataError("checkpoint: bad magic bytes");
    r.u32();
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DataError("checkpoint: format version " + std::to_string(version) + ", this build reads " +
                        std::to_string(kCheckpointVersion));
    const std::uint64_t digest = r.u64();
    if (expected && config_digest(*expected) != digest)
        throw CompatibilityError("checkpoint: model config digest " + hex64(digest) + " does not match " +
                                 hex64(config_digest(*expected)));
    Checkpoint c;
    const std::uint8_t mode = r.u8();
    if (mode > 1) throw DataError("checkpoint: unknown layer mode " + std::to_string(mode));
    c.mode = mode == 1 ? LayerMode::merged : LayerMode::training;
    c.epoch = static_cast<std::int64_t>(r.u64());
    try {
        c.config = run_config_from_json(r.str());
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint: embedded configuration: ") + e.what());
    }
    if (config_digest(c.config.model) != digest) throw DataError("checkpoint: embedded configuration does not match its digest");
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        auto rec = r.record();
        if (c.params.contains(rec.name)) throw DataError("checkpoint: duplicate parameter '" + rec.name + "'");
        c.params.add(rec.name, std::move(rec.value), rec.trainable);
    }
    c.optim.step = static_cast<std::int64_t>(r.u64());
    const std::uint32_t moments = r.u32();
    for (std::uint32_t i = 0; i < moments; ++i) {
        auto m = r.record();
        auto v = r.record();
        if (m.name != v.name || !c.params.contains(m.name) || c.params.get(m.name).value.shape() != m.value.shape() ||
            m.value.shape() != v.value.shape())
            throw DataError("checkpoint: optimizer state for '" + m.name + "' does not match the parameters");
        c.optim.names.push_back(m.name);
        c.optim.m.push_back(std::move(m.value));
        c.optim.v.push_back(std::move(v.value));
    }
    if (!r.done()) throw DataError("checkpoint: " + std::to_string(bytes.size() - r.offset()) + " trailing bytes");
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    const std::string bytes = serialize_checkpoint(checkpoint);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
            throw IoError("cannot write checkpoint " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    const std::string bytes(std::istreambuf_iterator<char>(in), {});
    return parse_checkpoint(bytes, expected);
}

}  // namespace cmsa
