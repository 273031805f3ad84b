#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gex/error.hpp"
#include "gex/rng.hpp"
#include "gex/tensor.hpp"

namespace gex {

enum class CifarVariant { Cifar10, Cifar100 };

inline int cifar_classes(CifarVariant v) { return v == CifarVariant::Cifar10 ? 10 : 100; }
inline int cifar_record_bytes(CifarVariant v) { return v == CifarVariant::Cifar10 ? 3073 : 3074; }

constexpr int kCifarDim = 32;
constexpr int kCifarPixels = 3 * kCifarDim * kCifarDim;  // channel-planar R,G,B

struct Dataset {
    CifarVariant variant = CifarVariant::Cifar10;
    bool train = true;
    int count = 0;
    std::vector<std::uint8_t> pixels;  // count * 3072
    std::vector<int> labels;           // fine labels for CIFAR-100

    int classes() const { return cifar_classes(variant); }
    const std::uint8_t* image(int i) const {
        return pixels.data() + static_cast<std::size_t>(i) * kCifarPixels;
    }
};

namespace detail {

inline void parse_cifar_file(const std::string& path, CifarVariant variant, Dataset& ds) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open dataset file: " + path);
    const std::int64_t size = static_cast<std::int64_t>(f.tellg());
    f.seekg(0);
    const int rec = cifar_record_bytes(variant);
    if (size == 0 || size % rec != 0)
        throw FormatError(path + ": file size " + std::to_string(size) +
                          " is not a whole number of " + std::to_string(rec) +
                          "-byte records; truncated record begins at byte offset " +
                          std::to_string((size / rec) * rec));
    const std::int64_t n = size / rec;
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(rec));
    const int nclasses = cifar_classes(variant);
    for (std::int64_t i = 0; i < n; ++i) {
        if (!f.read(reinterpret_cast<char*>(buf.data()), rec))
            throw IoError(path + ": short read at record " + std::to_string(i));
        const int label_off = variant == CifarVariant::Cifar100 ? 1 : 0;  // fine label
        const int label = buf[label_off];
        if (label >= nclasses)
            throw FormatError(path + ": label " + std::to_string(label) +
                              " out of range at byte offset " +
                              std::to_string(i * rec + label_off));
        ds.labels.push_back(label);
        ds.pixels.insert(ds.pixels.end(), buf.begin() + label_off + 1, buf.end());
        ++ds.count;
    }
}

}  // namespace detail

// Standard binary batches: CIFAR-10 as data_batch_1..5.bin / test_batch.bin
// with 3073-byte records (label + planar RGB); CIFAR-100 as train.bin /
// test.bin with 3074-byte records (coarse, fine, pixels). Fine labels used.
inline Dataset load_cifar(const std::string& dir, CifarVariant variant, bool train) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.variant = variant;
    ds.train = train;
    if (variant == CifarVariant::Cifar10) {
        if (train) {
            bool any = false;
            for (int b = 1; b <= 5; ++b) {
                const std::string p = dir + "/data_batch_" + std::to_string(b) + ".bin";
                if (fs::exists(p)) {
                    detail::parse_cifar_file(p, variant, ds);
                    any = true;
                }
            }
            if (!any) throw IoError("no data_batch_*.bin found under " + dir);
        } else {
            detail::parse_cifar_file(dir + "/test_batch.bin", variant, ds);
        }
    } else {
        detail::parse_cifar_file(dir + (train ? "/train.bin" : "/test.bin"), variant, ds);
    }
    return ds;
}

// Writes a dataset back out in the standard binary layout (fixtures, the
// synthetic fallback). CIFAR-10 training data goes into a single batch file.
inline void write_cifar(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string path;
    if (ds.variant == CifarVariant::Cifar10)
        path = dir + (ds.train ? "/data_batch_1.bin" : "/test_batch.bin");
    else
        path = dir + (ds.train ? "/train.bin" : "/test.bin");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write dataset file: " + path);
    for (int i = 0; i < ds.count; ++i) {
        if (ds.variant == CifarVariant::Cifar100) {
            const std::uint8_t coarse = static_cast<std::uint8_t>(ds.labels[i] % 20);
            f.put(static_cast<char>(coarse));
        }
        f.put(static_cast<char>(ds.labels[i]));
        f.write(reinterpret_cast<const char*>(ds.image(i)), kCifarPixels);
    }
}

// Difficulty of the generated stand-in data: pattern amplitude vs pixel
// noise. The defaults separate quickly; kCifarLike approximates the error
// regime of the real benchmark more closely.
struct SyntheticSpec {
    float amplitude = 62.0f;
    float noise = 18.0f;
    float brightness = 8.0f;
};
inline constexpr SyntheticSpec kCifarLikeSynthetic{52.0f, 24.0f, 10.0f};

// Class-separable synthetic images in the CIFAR format: a smooth per-class
// pattern plus per-sample noise. Stands in for the real data where the
// benchmark files are unavailable; every draw is a function of (seed, split).
inline Dataset synthetic_cifar(CifarVariant variant, bool train, int n, std::uint64_t seed,
                               const SyntheticSpec& spec = {}) {
    Dataset ds;
    ds.variant = variant;
    ds.train = train;
    ds.count = n;
    const int classes = cifar_classes(variant);
    ds.pixels.resize(static_cast<std::size_t>(n) * kCifarPixels);
    ds.labels.resize(n);

    // low-frequency class prototypes from a 4x4 grid, bilinearly upsampled
    std::vector<float> protos(static_cast<std::size_t>(classes) * kCifarPixels);
    Rng prng = Rng::stream(seed, "synth-protos");
    for (int k = 0; k < classes; ++k) {
        float grid[3][5][5];
        for (int c = 0; c < 3; ++c)
            for (int gy = 0; gy < 5; ++gy)
                for (int gx = 0; gx < 5; ++gx)
                    grid[c][gy][gx] = static_cast<float>(prng.uniform() * 2.0 - 1.0);
        float* pp = protos.data() + static_cast<std::size_t>(k) * kCifarPixels;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < kCifarDim; ++y)
                for (int x = 0; x < kCifarDim; ++x) {
                    const float fy = y / 8.0f, fx = x / 8.0f;
                    const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
                    const float ay = fy - y0, ax = fx - x0;
                    const float v =
                        grid[c][y0][x0] * (1 - ay) * (1 - ax) +
                        grid[c][y0 + 1][x0] * ay * (1 - ax) +
                        grid[c][y0][x0 + 1] * (1 - ay) * ax +
                        grid[c][y0 + 1][x0 + 1] * ay * ax;
                    pp[(c * kCifarDim + y) * kCifarDim + x] = v;
                }
    }

    Rng rng = Rng::stream(seed, train ? "synth-train" : "synth-test");
    for (int i = 0; i < n; ++i) {
        const int label = i % classes;
        ds.labels[i] = label;
        const float* pp = protos.data() + static_cast<std::size_t>(label) * kCifarPixels;
        const float shift = static_cast<float>(rng.normal()) * spec.brightness;
        std::uint8_t* img = ds.pixels.data() + static_cast<std::size_t>(i) * kCifarPixels;
        for (int j = 0; j < kCifarPixels; ++j) {
            const float noise = static_cast<float>(rng.normal()) * spec.noise;
            float v = 128.0f + spec.amplitude * pp[j] + noise + shift;
            img[j] = static_cast<std::uint8_t>(std::min(255.0f, std::max(0.0f, v)));
        }
    }
    return ds;
}

// ----------------------------------------------------------- transforms ---

struct NormStats {
    std::array<float, 3> mean{};  // in [0,1] pixel units
    std::array<float, 3> stddev{};
};

inline NormStats compute_norm_stats(const Dataset& train) {
    NormStats st;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        const std::int64_t per = static_cast<std::int64_t>(kCifarDim) * kCifarDim;
        for (int i = 0; i < train.count; ++i) {
            const std::uint8_t* img = train.image(i);
            for (std::int64_t j = 0; j < per; ++j) {
                const double v = img[c * per + j] / 255.0;
                s += v;
                s2 += v * v;
            }
        }
        const double n = static_cast<double>(train.count) * per;
        const double mu = s / n;
        double var = s2 / n - mu * mu;
        if (var < 1e-12) var = 1e-12;
        st.mean[c] = static_cast<float>(mu);
        st.stddev[c] = static_cast<float>(std::sqrt(var));
    }
    return st;
}

// Stats computed from the training split at first load, cached alongside it.
inline NormStats load_or_compute_norm_stats(const std::string& dir, const Dataset& train) {
    const std::string cache = dir + "/gex_norm_stats.txt";
    {
        std::ifstream f(cache);
        NormStats st;
        if (f >> st.mean[0] >> st.mean[1] >> st.mean[2] >> st.stddev[0] >> st.stddev[1] >>
            st.stddev[2])
            return st;
    }
    NormStats st = compute_norm_stats(train);
    std::ofstream f(cache);
    if (f) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %.9g %.9g\n", st.mean[0],
                      st.mean[1], st.mean[2], st.stddev[0], st.stddev[1], st.stddev[2]);
        f << buf;
    }
    return st;
}

struct AugmentSpec {
    int pad = 4;
    int crop = kCifarDim;
    float flip_p = 0.5f;
    NormStats norm;
};

struct AugmentDraw {
    int off_y = 0, off_x = 0;  // in [0, 2*pad]
    bool flip = false;
};

// Draw order is pinned: off_y, off_x, flip.
inline AugmentDraw draw_augment(const AugmentSpec& spec, Rng& rng) {
    AugmentDraw d;
    d.off_y = static_cast<int>(rng.uniform_int(2 * spec.pad + 1));
    d.off_x = static_cast<int>(rng.uniform_int(2 * spec.pad + 1));
    d.flip = rng.bernoulli(spec.flip_p);
    return d;
}

// Zero-pad by `pad` per side, crop a 32x32 patch at the drawn offset from
// the (possibly flipped) padded image, then per-channel (x - mean)/std.
inline void augment_into(const Dataset& ds, int index, const AugmentSpec& spec,
                         const AugmentDraw& d, float* out) {
    const std::uint8_t* img = ds.image(index);
    const int P = spec.pad;
    for (int c = 0; c < 3; ++c) {
        const float mu = spec.norm.mean[c], inv = 1.0f / spec.norm.stddev[c];
        for (int y = 0; y < kCifarDim; ++y) {
            const int sy = y + d.off_y - P;
            for (int x = 0; x < kCifarDim; ++x) {
                const int raw_x = x + d.off_x - P;
                const int sx = d.flip ? kCifarDim - 1 - raw_x : raw_x;
                float v = 0.0f;
                if (sy >= 0 && sy < kCifarDim && sx >= 0 && sx < kCifarDim)
                    v = img[(c * kCifarDim + sy) * kCifarDim + sx] / 255.0f;
                out[(c * kCifarDim + y) * kCifarDim + x] = (v - mu) * inv;
            }
        }
    }
}

// Eval path: normalization only.
inline void eval_transform_into(const Dataset& ds, int index, const NormStats& norm,
                                float* out) {
    const std::uint8_t* img = ds.image(index);
    for (int c = 0; c < 3; ++c) {
        const float mu = norm.mean[c], inv = 1.0f / norm.stddev[c];
        const int per = kCifarDim * kCifarDim;
        for (int j = 0; j < per; ++j)
            out[c * per + j] = (img[c * per + j] / 255.0f - mu) * inv;
    }
}

}  // namespace gex
