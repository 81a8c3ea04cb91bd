#ifndef MPUNET_NN_CHECKPOINT_HPP
#define MPUNET_NN_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/core/error.hpp"
#include "mpunet/nn/graph.hpp"

namespace mpunet::nn {

// A checkpoint is `<stem>.json` (manifest) plus `<stem>.bin` (little-endian
// float32 payload, parameters then buffers, in graph order).

namespace detail {

inline void put_f32(std::vector<char>& out, float f)
{
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
}

inline float get_f32(const char* p)
{
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    return std::bit_cast<float>(u);
}

} // namespace detail

template <typename T>
void save_checkpoint(const Graph<T>& g, const std::filesystem::path& stem)
{
    nlohmann::json entries = nlohmann::json::array();
    std::vector<char> payload;
    auto add = [&](const std::string& name, const std::vector<int>& shape, const AlignedVector<T>& values,
                   const char* kind) {
        entries.push_back({{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"offset", payload.size()},
                           {"kind", kind}});
        for (T v : values) detail::put_f32(payload, static_cast<float>(v));
    };
    for (const auto& p : g.params()) add(p.name, p.shape, p.value, "param");
    for (const auto& b : g.buffers()) add(b.name, b.shape, b.value, "buffer");
    nlohmann::json manifest{{"format", "mpunet-checkpoint"}, {"byte_order", "little"}, {"entries", entries},
                            {"payload_bytes", payload.size()}};
    auto json_path = stem;
    json_path += ".json";
    auto bin_path = stem;
    bin_path += ".bin";
    std::ofstream js(json_path);
    std::ofstream bin(bin_path, std::ios::binary);
    if (!js || !bin) throw DataError("cannot write checkpoint " + stem.string());
    js << manifest.dump(1) << '\n';
    bin.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!js || !bin) throw DataError("failed writing checkpoint " + stem.string());
}

/// Loads values into an already-built graph; names and shapes must match.
template <typename T>
void load_checkpoint(Graph<T>& g, const std::filesystem::path& stem)
{
    auto json_path = stem;
    json_path += ".json";
    auto bin_path = stem;
    bin_path += ".bin";
    std::ifstream js(json_path);
    if (!js) throw DataError("cannot open checkpoint manifest " + json_path.string());
    nlohmann::json manifest;
    try {
        js >> manifest;
    }
    catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw DataError("cannot open checkpoint payload " + bin_path.string());
    std::vector<char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    const auto& entries = manifest.at("entries");
    std::size_t idx = 0;
    auto take = [&](const std::string& name, const std::vector<int>& shape, AlignedVector<T>& values) {
        if (idx >= entries.size()) throw DataError("checkpoint has too few entries");
        const auto& e = entries[idx++];
        if (e.at("name").get<std::string>() != name) throw DataError("checkpoint entry order mismatch at " + name);
        if (e.at("shape").get<std::vector<int>>() != shape) throw DataError("checkpoint shape mismatch for " + name);
        if (e.at("dtype").get<std::string>() != "f32") throw DataError("unsupported checkpoint dtype for " + name);
        const std::size_t off = e.at("offset").get<std::size_t>();
        if (off + 4 * values.size() > payload.size()) throw DataError("checkpoint payload too short for " + name);
        for (std::size_t i = 0; i < values.size(); ++i)
            values[i] = static_cast<T>(detail::get_f32(payload.data() + off + 4 * i));
    };
    for (auto& p : g.params()) take(p.name, p.shape, p.value);
    for (auto& b : g.buffers()) take(b.name, b.shape, b.value);
    if (idx != entries.size()) throw DataError("checkpoint has unexpected extra entries");
}

} // namespace mpunet::nn

#endif // MPUNET_NN_CHECKPOINT_HPP
