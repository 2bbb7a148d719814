#include "cmsa/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "cmsa/config.hpp"
#include "cmsa/errors.hpp"

namespace cmsa {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMarker = "SYNTHETIC";

struct Layout {
    const char* subdir;
    std::vector<std::string> train, test;
    int label_bytes;
    int classes;
};

Layout layout(CifarKind kind) {
    if (kind == CifarKind::cifar10)
        return {"cifar-10-batches-bin",
                {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"},
                {"test_batch.bin"},
                1,
                10};
    return {"cifar-100-binary", {"train.bin"}, {"test.bin"}, 2, 100};
}

fs::path resolve_dir(const std::string& dir, const Layout& l) {
    const fs::path base(dir);
    if (fs::exists(base / l.train.front()) || fs::exists(base / l.test.front())) return base;
    if (fs::exists(base / l.subdir)) return base / l.subdir;
    return base;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
        throw IoError("cannot write " + path.string());
}

}  // namespace

CifarKind cifar_kind(std::string_view name) {
    if (name == "cifar10") return CifarKind::cifar10;
    if (name == "cifar100") return CifarKind::cifar100;
    throw ConfigError("train.dataset: expected \"cifar10\" or \"cifar100\", got \"" + std::string(name) + "\"");
}

Dataset read_cifar(const std::string& dir, CifarKind kind, Split split) {
    const Layout l = layout(kind);
    const fs::path root = resolve_dir(dir, l);
    Dataset ds;
    ds.classes = l.classes;
    ds.synthetic = fs::exists(root / kMarker);
    const std::size_t record = static_cast<std::size_t>(l.label_bytes + kImageBytes);
    for (const auto& name : split == Split::train ? l.train : l.test) {
        const fs::path path = root / name;
        const std::string bytes = read_file(path);
        if (bytes.size() % record != 0)
            throw DataError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                            std::to_string(record) + "-byte record");
        for (std::size_t off = 0; off < bytes.size(); off += record) {
            const int label = static_cast<unsigned char>(bytes[off + static_cast<std::size_t>(l.label_bytes) - 1]);
            if (label >= l.classes)
                throw DataError(path.string() + ": label " + std::to_string(label) + " out of range at record " +
                                std::to_string(off / record));
            Image img;
            std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(off) + l.label_bytes, kImageBytes, img.begin());
            ds.images.push_back(img);
            ds.labels.push_back(label);
        }
    }
    const std::int64_t expected = split == Split::train ? 50000 : 10000;
    if (!ds.synthetic && ds.size() != expected)
        throw DataError(root.string() + ": " + std::to_string(ds.size()) + " records, expected " +
                        std::to_string(expected));
    return ds;
}

void write_synthetic_cifar(const std::string& dir, CifarKind kind, int train_count, int test_count,
                           std::uint64_t seed) {
    const Layout l = layout(kind);
    fs::create_directories(dir);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI), freq(0.5, 2.5), level(60.0, 200.0);
    std::normal_distribution<double> noise(0.0, 24.0);
    std::vector<std::vector<double>> patterns(static_cast<std::size_t>(l.classes));
    for (auto& p : patterns) {
        p.resize(kImageBytes);
        for (int c = 0; c < 3; ++c) {
            const double fy = freq(rng), fx = freq(rng), py = phase(rng), px = phase(rng), base = level(rng);
            for (int y = 0; y < kImageSide; ++y)
                for (int x = 0; x < kImageSide; ++x)
                    p[static_cast<std::size_t>((c * kImageSide + y) * kImageSide + x)] =
                        base + 50.0 * std::sin(fy * y * M_PI / kImageSide + py) * std::cos(fx * x * M_PI / kImageSide + px);
        }
    }
    std::uniform_int_distribution<int> label_dist(0, l.classes - 1);
    auto records = [&](int count) {
        std::string out;
        for (int i = 0; i < count; ++i) {
            const int label = label_dist(rng);
            if (l.label_bytes == 2) out.push_back(static_cast<char>(label / 5));
            out.push_back(static_cast<char>(label));
            for (double v : patterns[static_cast<std::size_t>(label)])
                out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v + noise(rng)), 0L, 255L))));
        }
        return out;
    };
    const fs::path root(dir);
    write_file(root / l.train.front(), records(train_count));
    for (std::size_t i = 1; i < l.train.size(); ++i) write_file(root / l.train[i], "");
    write_file(root / l.test.front(), records(test_count));
    write_file(root / kMarker, "synthetic fixture, seed " + std::to_string(seed) + "\n");
}

std::uint64_t dataset_digest(const std::string& dir, CifarKind kind) {
    const Layout l = layout(kind);
    const fs::path root = resolve_dir(dir, l);
    std::uint64_t h = fnv1a64("");
    for (const auto* files : {&l.train, &l.test})
        for (const auto& name : *files) {
            h = fnv1a64(name, h);
            h = fnv1a64(read_file(root / name), h);
        }
    return h;
}

Image crop_image(const Image& image, int dy, int dx, int padding) {
    Image out{};
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kImageSide; ++y) {
            const int sy = y + dy - padding;
            if (sy < 0 || sy >= kImageSide) continue;
            for (int x = 0; x < kImageSide; ++x) {
                const int sx = x + dx - padding;
                if (sx < 0 || sx >= kImageSide) continue;
                out[static_cast<std::size_t>((c * kImageSide + y) * kImageSide + x)] =
                    image[static_cast<std::size_t>((c * kImageSide + sy) * kImageSide + sx)];
            }
        }
    return out;
}

Image flip_image(const Image& image) {
    Image out;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kImageSide; ++y)
            for (int x = 0; x < kImageSide; ++x)
                out[static_cast<std::size_t>((c * kImageSide + y) * kImageSide + x)] =
                    image[static_cast<std::size_t>((c * kImageSide + y) * kImageSide + (kImageSide - 1 - x))];
    return out;
}

Image augment(const Image& image, std::mt19937_64& rng, int padding, bool flip) {
    Image out = image;
    if (padding > 0) {
        std::uniform_int_distribution<int> offset(0, 2 * padding);
        const int dy = offset(rng), dx = offset(rng);
        out = crop_image(out, dy, dx, padding);
    }
    if (flip && std::uniform_int_distribution<int>(0, 1)(rng) == 1) out = flip_image(out);
    return out;
}

Tensor to_batch(std::span<const Image> images, std::span<const double> mean, std::span<const double> std) {
    if (mean.size() != 3 || std.size() != 3) throw ConfigError("train.mean/std: need three channel values");
    const auto n = static_cast<std::int64_t>(images.size());
    Tensor out({n, kImageSide, kImageSide, 3});
    float* o = out.ptr();
    for (std::int64_t i = 0; i < n; ++i) {
        const Image& img = images[static_cast<std::size_t>(i)];
        for (int y = 0; y < kImageSide; ++y)
            for (int x = 0; x < kImageSide; ++x)
                for (int c = 0; c < 3; ++c)
                    *o++ = static_cast<float>(
                        (img[static_cast<std::size_t>((c * kImageSide + y) * kImageSide + x)] / 255.0 - mean[c]) / std[c]);
    }
    return out;
}

}  // namespace cmsa
