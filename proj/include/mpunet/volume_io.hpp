#ifndef MPUNET_VOLUME_IO_HPP
#define MPUNET_VOLUME_IO_HPP

// Volume container: a UTF-8 key=value header next to a raw little-endian
// payload in C order (index 2 fastest, channels interleaved last).
//
//   format=mpvol
//   shape=48 48 48
//   spacing=1 1 1
//   origin=0 0 0
//   kind=label
//   channels=1
//   dtype=u8
//   byte_order=little
//   num_classes=3
//   data_file=subject_000_lab.raw

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include "mpunet/volume.hpp"

namespace mpunet {

using AnyVolume = std::variant<IntensityVolume, LabelVolume>;

namespace detail {

inline std::string format_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_ws(const std::string& s)
{
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

inline double parse_double(const std::string& tok, const std::string& key)
{
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw DataError("malformed header: bad number in '" + key + "'");
    return v;
}

inline long parse_int(const std::string& tok, const std::string& key)
{
    long v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw DataError("malformed header: bad integer in '" + key + "'");
    return v;
}

template <typename T>
void to_little_endian(std::vector<T>& v)
{
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        for (auto& x : v) {
            auto* b = reinterpret_cast<unsigned char*>(&x);
            std::reverse(b, b + sizeof(T));
        }
    }
}

inline std::filesystem::path payload_path_for(const std::filesystem::path& header)
{
    auto p = header;
    p.replace_extension(".raw");
    return p;
}

} // namespace detail

struct VolumeHeader {
    Geometry geom;
    VolumeKind kind = VolumeKind::intensity;
    int channels = 1;
    int num_classes = 0;
    std::string data_file;
};

inline VolumeHeader read_volume_header(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open volume header '" + path.string() + "'");
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(in, line);) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("malformed header: line without '=' in " + path.string());
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError("malformed header: missing '" + key + "' in " + path.string());
        return it->second;
    };
    if (need("format") != "mpvol") throw DataError("malformed header: unknown format");
    VolumeHeader h;
    auto triple = [&](const std::string& key) {
        const auto toks = detail::split_ws(need(key));
        if (toks.size() != 3) throw DataError("malformed header: '" + key + "' needs three values");
        return toks;
    };
    const auto shape = triple("shape");
    const auto spacing = triple("spacing");
    const auto origin = triple("origin");
    for (int a = 0; a < 3; ++a) {
        h.geom.shape[a] = static_cast<int>(detail::parse_int(shape[a], "shape"));
        h.geom.spacing[a] = detail::parse_double(spacing[a], "spacing");
        h.geom.origin[a] = detail::parse_double(origin[a], "origin");
    }
    h.geom.validate();
    const auto& kind = need("kind");
    const auto& dtype = need("dtype");
    if (kind == "intensity" && dtype == "f32") h.kind = VolumeKind::intensity;
    else if (kind == "label" && dtype == "u8") h.kind = VolumeKind::label;
    else throw DataError("malformed header: unsupported kind/dtype '" + kind + "/" + dtype + "'");
    if (need("byte_order") != "little") throw DataError("malformed header: byte_order must be little");
    h.channels = static_cast<int>(detail::parse_int(need("channels"), "channels"));
    if (h.channels < 1) throw DataError("malformed header: channels must be positive");
    if (h.kind == VolumeKind::label) {
        h.num_classes = static_cast<int>(detail::parse_int(need("num_classes"), "num_classes"));
        if (h.num_classes < 0 || h.num_classes > 255) throw DataError("malformed header: num_classes out of range");
    }
    h.data_file = need("data_file");
    return h;
}

namespace detail {

template <typename T>
Volume<T> read_payload(const std::filesystem::path& header_path, const VolumeHeader& h)
{
    Volume<T> v(h.geom, h.channels, h.num_classes);
    const auto payload = header_path.parent_path() / h.data_file;
    std::ifstream in(payload, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open volume payload '" + payload.string() + "'");
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != v.data.size() * sizeof(T))
        throw DataError("payload length mismatch: expected " + std::to_string(v.data.size() * sizeof(T)) +
                        " bytes, found " + std::to_string(bytes) + " in " + payload.string());
    in.seekg(0);
    in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(bytes));
    to_little_endian(v.data);
    if constexpr (std::is_same_v<T, std::uint8_t>) {
        for (auto x : v.data)
            if (x > h.num_classes)
                throw DataError("label value " + std::to_string(x) + " exceeds declared class count " +
                                std::to_string(h.num_classes));
    }
    return v;
}

} // namespace detail

inline AnyVolume load_volume(const std::filesystem::path& path)
{
    const VolumeHeader h = read_volume_header(path);
    if (h.kind == VolumeKind::label) return detail::read_payload<std::uint8_t>(path, h);
    return detail::read_payload<float>(path, h);
}

inline IntensityVolume load_intensity(const std::filesystem::path& path)
{
    auto v = load_volume(path);
    if (!std::holds_alternative<IntensityVolume>(v)) throw DataError(path.string() + " is not an intensity volume");
    return std::get<IntensityVolume>(std::move(v));
}

inline LabelVolume load_labels(const std::filesystem::path& path)
{
    auto v = load_volume(path);
    if (!std::holds_alternative<LabelVolume>(v)) throw DataError(path.string() + " is not a label volume");
    return std::get<LabelVolume>(std::move(v));
}

/// Writes `path` (header) and a sibling `.raw` payload.
template <typename T>
void save_volume(const Volume<T>& v, const std::filesystem::path& path)
{
    constexpr bool is_label = Volume<T>::kind == VolumeKind::label;
    const auto payload = detail::payload_path_for(path);
    {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw DataError("cannot write volume header '" + path.string() + "'");
        const auto& g = v.geom;
        out << "format=mpvol\n";
        out << "shape=" << g.shape[0] << ' ' << g.shape[1] << ' ' << g.shape[2] << '\n';
        out << "spacing=" << detail::format_double(g.spacing[0]) << ' ' << detail::format_double(g.spacing[1]) << ' '
            << detail::format_double(g.spacing[2]) << '\n';
        out << "origin=" << detail::format_double(g.origin[0]) << ' ' << detail::format_double(g.origin[1]) << ' '
            << detail::format_double(g.origin[2]) << '\n';
        out << "kind=" << (is_label ? "label" : "intensity") << '\n';
        out << "channels=" << v.channels << '\n';
        out << "dtype=" << (is_label ? "u8" : "f32") << '\n';
        out << "byte_order=little\n";
        if (is_label) out << "num_classes=" << v.num_classes << '\n';
        out << "data_file=" << payload.filename().string() << '\n';
        if (!out) throw DataError("failed writing volume header '" + path.string() + "'");
    }
    std::ofstream out(payload, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write volume payload '" + payload.string() + "'");
    auto bytes = v.data;
    detail::to_little_endian(bytes);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() * sizeof(T)));
    if (!out) throw DataError("failed writing volume payload '" + payload.string() + "'");
}

} // namespace mpunet

#endif // MPUNET_VOLUME_IO_HPP
