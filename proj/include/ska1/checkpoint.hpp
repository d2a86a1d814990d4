#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "ska1/core/errors.hpp"
#include "ska1/model/registry.hpp"

namespace ska1 {

// Checkpoint archive: magic "SKA1CKPT", u32 version, a JSON manifest
// {"config_hash", "stage", "step", "v":1}, then every registry tensor keyed
// "group/name" in registration order. Written atomically (temp file + rename).

struct CheckpointMeta {
    std::string config_hash;
    int stage = 0;
    int step = 0;
};

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ParameterRegistry& reg,
                            const CheckpointMeta& meta) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint: " + tmp.string());
        f.write("SKA1CKPT", 8);
        detail::write_u32(f, 1);
        nlohmann::json manifest;
        manifest["v"] = 1;
        manifest["config_hash"] = meta.config_hash;
        manifest["stage"] = meta.stage;
        manifest["step"] = meta.step;
        const std::string mstr = manifest.dump();
        detail::write_u32(f, static_cast<std::uint32_t>(mstr.size()));
        f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
        detail::write_u32(f, static_cast<std::uint32_t>(reg.params().size()));
        for (const auto& p : reg.params()) {
            const std::string key = p.key();
            detail::write_u32(f, static_cast<std::uint32_t>(key.size()));
            f.write(key.data(), static_cast<std::streamsize>(key.size()));
            const Tensor& t = p.var->val;
            detail::write_u32(f, static_cast<std::uint32_t>(t.rank()));
            for (int d = 0; d < t.rank(); ++d) detail::write_u32(f, static_cast<std::uint32_t>(t.dim(d)));
            f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
        }
        if (!f) throw IoError("checkpoint write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// Loads tensors into an existing registry (shapes must match the constructed
// model). Pass the expected config hash to reject checkpoints from a different
// architecture; empty string skips the check.
inline CheckpointMeta load_checkpoint(const std::filesystem::path& path, ParameterRegistry& reg,
                                      const std::string& expected_hash = "") {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint: " + path.string());
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "SKA1CKPT", 8) != 0) throw IoError("bad checkpoint magic: " + path.string());
    if (detail::read_u32(f) != 1) throw IoError("unsupported checkpoint version: " + path.string());
    const std::uint32_t mlen = detail::read_u32(f);
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), mlen);
    if (!f) throw IoError("truncated checkpoint manifest: " + path.string());
    nlohmann::json manifest = nlohmann::json::parse(mstr);
    CheckpointMeta meta;
    meta.config_hash = manifest.at("config_hash").get<std::string>();
    meta.stage = manifest.at("stage").get<int>();
    meta.step = manifest.at("step").get<int>();
    if (!expected_hash.empty() && meta.config_hash != expected_hash)
        throw ConfigError("checkpoint config hash " + meta.config_hash + " does not match expected " +
                          expected_hash);

    const std::uint32_t n = detail::read_u32(f);
    if (n != reg.params().size())
        throw ConfigError("checkpoint tensor count " + std::to_string(n) + " != registry size " +
                          std::to_string(reg.params().size()));
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t klen = detail::read_u32(f);
        std::string key(klen, '\0');
        f.read(key.data(), klen);
        const std::uint32_t rank = detail::read_u32(f);
        std::vector<int> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(detail::read_u32(f));
        const auto slash = key.find('/');
        if (slash == std::string::npos) throw IoError("malformed checkpoint key: " + key);
        Param& p = reg.at(key.substr(0, slash), key.substr(slash + 1));
        if (p.var->val.shape() != shape)
            throw ConfigError("checkpoint tensor " + key + " shape mismatch");
        f.read(reinterpret_cast<char*>(p.var->val.data()),
               static_cast<std::streamsize>(p.var->val.numel() * 8));
        if (!f) throw IoError("truncated checkpoint tensor: " + key);
    }
    return meta;
}

} // namespace ska1
