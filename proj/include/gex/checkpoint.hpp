#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gex/model.hpp"

// Checkpoint container, magic "GEKT". Little-endian layout:
//   magic[4] version:u32
//   config_len:u64 config_echo bytes
//   epoch:u32 (next epoch to run)  seed:u64
//   state_len:u64 state blob (schedule + rng stream state)
//   n_tensors:u32 { name_len:u32 name shape:i32[4] numel:u64 f32 payload }
//   n_momentum:u32 { name_len:u32 param-name numel:u64 f32 payload }
// Tensors cover parameters and buffers in registry order; loading validates
// every name and shape against the target model's registry.

namespace gex {

struct CheckpointMeta {
    std::uint32_t version = 1;
    std::string config_echo;
    std::uint32_t epoch = 0;
    std::uint64_t seed = 0;
    std::vector<std::uint8_t> state;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw FormatError(std::string("checkpoint truncated reading ") + what);
    return v;
}
inline std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw FormatError(std::string("checkpoint truncated reading ") + what);
    return v;
}
inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_str(std::istream& is, const char* what) {
    const std::uint32_t n = get_u32(is, what);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n))
        throw FormatError(std::string("checkpoint truncated reading ") + what);
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& model, const SGD* opt,
                            const CheckpointMeta& meta) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    f.write("GEKT", 4);
    detail::put_u32(f, meta.version);
    detail::put_u64(f, meta.config_echo.size());
    f.write(meta.config_echo.data(), static_cast<std::streamsize>(meta.config_echo.size()));
    detail::put_u32(f, meta.epoch);
    detail::put_u64(f, meta.seed);
    detail::put_u64(f, meta.state.size());
    f.write(reinterpret_cast<const char*>(meta.state.data()),
            static_cast<std::streamsize>(meta.state.size()));

    const auto& params = model.store.params();
    const auto& buffers = model.store.buffers();
    detail::put_u32(f, static_cast<std::uint32_t>(params.size() + buffers.size()));
    auto put_tensor = [&](const std::string& name, const Tensor& t) {
        detail::put_str(f, name);
        const Shape4& s = t.shape();
        const std::int32_t sh[4] = {s.n, s.c, s.h, s.w};
        f.write(reinterpret_cast<const char*>(sh), 16);
        detail::put_u64(f, static_cast<std::uint64_t>(t.numel()));
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * 4));
    };
    for (const auto& e : params) put_tensor(e.name, e.tensor);
    for (const auto& e : buffers) put_tensor(e.name, e.tensor);

    if (opt) {
        detail::put_u32(f, static_cast<std::uint32_t>(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            detail::put_str(f, params[i].name);
            const auto& v = opt->velocity()[i];
            detail::put_u64(f, v.size());
            f.write(reinterpret_cast<const char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * 4));
        }
    } else {
        detail::put_u32(f, 0);
    }
    if (!f) throw IoError("write failed for checkpoint: " + path);
}

inline CheckpointMeta load_checkpoint(const std::string& path, Model& model, SGD* opt) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "GEKT", 4) != 0)
        throw FormatError(path + ": bad magic, not a GEKT checkpoint");
    CheckpointMeta meta;
    meta.version = detail::get_u32(f, "version");
    if (meta.version != 1)
        throw FormatError(path + ": unsupported checkpoint version " +
                          std::to_string(meta.version));
    meta.config_echo = [&] {
        const std::uint64_t n = detail::get_u64(f, "config length");
        std::string s(n, '\0');
        if (n && !f.read(s.data(), static_cast<std::streamsize>(n)))
            throw FormatError(path + ": truncated config echo");
        return s;
    }();
    meta.epoch = detail::get_u32(f, "epoch");
    meta.seed = detail::get_u64(f, "seed");
    const std::uint64_t slen = detail::get_u64(f, "state length");
    meta.state.resize(slen);
    if (slen && !f.read(reinterpret_cast<char*>(meta.state.data()),
                        static_cast<std::streamsize>(slen)))
        throw FormatError(path + ": truncated state blob");

    const std::uint32_t n_tensors = detail::get_u32(f, "tensor count");
    std::size_t applied = 0;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = detail::get_str(f, "tensor name");
        std::int32_t sh[4];
        if (!f.read(reinterpret_cast<char*>(sh), 16))
            throw FormatError(path + ": truncated shape for tensor " + name);
        const std::uint64_t numel = detail::get_u64(f, "tensor size");
        Tensor* dst = model.store.find(name);
        if (!dst)
            throw FormatError(path + ": tensor '" + name +
                              "' does not exist in the model registry");
        const Shape4 got{sh[0], sh[1], sh[2], sh[3]};
        if (!(got == dst->shape()) || numel != static_cast<std::uint64_t>(dst->numel()))
            throw FormatError(path + ": shape mismatch for tensor '" + name + "': file " +
                              got.str() + " vs model " + dst->shape().str());
        if (!f.read(reinterpret_cast<char*>(dst->data()),
                    static_cast<std::streamsize>(numel * 4)))
            throw FormatError(path + ": truncated payload for tensor " + name);
        ++applied;
    }
    const std::size_t expected = model.store.params().size() + model.store.buffers().size();
    if (applied != expected)
        throw FormatError(path + ": checkpoint carries " + std::to_string(applied) +
                          " tensors, model registry has " + std::to_string(expected));

    const std::uint32_t n_mom = detail::get_u32(f, "momentum count");
    if (opt && n_mom != 0) {
        if (n_mom != model.store.params().size())
            throw FormatError(path + ": momentum buffer count mismatch");
        for (std::uint32_t i = 0; i < n_mom; ++i) {
            const std::string name = detail::get_str(f, "momentum name");
            if (name != model.store.params()[i].name)
                throw FormatError(path + ": momentum order mismatch at '" + name + "'");
            const std::uint64_t numel = detail::get_u64(f, "momentum size");
            auto& v = opt->velocity()[i];
            if (numel != v.size())
                throw FormatError(path + ": momentum size mismatch for '" + name + "'");
            if (!f.read(reinterpret_cast<char*>(v.data()),
                        static_cast<std::streamsize>(numel * 4)))
                throw FormatError(path + ": truncated momentum for " + name);
        }
    }
    return meta;
}

// Config echo only, without needing a built model (CLI restore path).
inline CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "GEKT", 4) != 0)
        throw FormatError(path + ": bad magic, not a GEKT checkpoint");
    CheckpointMeta meta;
    meta.version = detail::get_u32(f, "version");
    const std::uint64_t n = detail::get_u64(f, "config length");
    meta.config_echo.resize(n);
    if (n && !f.read(meta.config_echo.data(), static_cast<std::streamsize>(n)))
        throw FormatError(path + ": truncated config echo");
    meta.epoch = detail::get_u32(f, "epoch");
    meta.seed = detail::get_u64(f, "seed");
    return meta;
}

}  // namespace gex
