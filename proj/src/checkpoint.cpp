#include "peftdml/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace peftdml {

namespace {

const char kB64Chars[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string bytes_to_base64(const unsigned char* data, size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        unsigned int v = data[i] << 16;
        if (i + 1 < n) v |= data[i + 1] << 8;
        if (i + 2 < n) v |= data[i + 2];
        out.push_back(kB64Chars[(v >> 18) & 0x3f]);
        out.push_back(kB64Chars[(v >> 12) & 0x3f]);
        out.push_back(i + 1 < n ? kB64Chars[(v >> 6) & 0x3f] : '=');
        out.push_back(i + 2 < n ? kB64Chars[v & 0x3f] : '=');
    }
    return out;
}

int b64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    throw IoError("base64: invalid character");
}

std::vector<unsigned char> base64_to_bytes(const std::string& s) {
    if (s.size() % 4 != 0) throw IoError("base64: truncated input");
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (size_t i = 0; i < s.size(); i += 4) {
        int pad = 0;
        unsigned int v = 0;
        for (int j = 0; j < 4; ++j) {
            char c = s[i + j];
            if (c == '=') {
                ++pad;
                v <<= 6;
            } else {
                if (pad) throw IoError("base64: padding before data");
                v = (v << 6) | static_cast<unsigned>(b64_value(c));
            }
        }
        out.push_back((v >> 16) & 0xff);
        if (pad < 2) out.push_back((v >> 8) & 0xff);
        if (pad < 1) out.push_back(v & 0xff);
    }
    return out;
}

}  // namespace

std::string doubles_to_base64(const std::vector<double>& v) {
    // doubles are serialized little-endian byte for byte
    std::vector<unsigned char> bytes(v.size() * 8);
    for (size_t i = 0; i < v.size(); ++i) {
        uint64_t bits;
        std::memcpy(&bits, &v[i], 8);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = (bits >> (8 * b)) & 0xff;
    }
    return bytes_to_base64(bytes.data(), bytes.size());
}

std::vector<double> base64_to_doubles(const std::string& s) {
    auto bytes = base64_to_bytes(s);
    if (bytes.size() % 8 != 0) throw IoError("base64: byte count is not a multiple of 8");
    std::vector<double> out(bytes.size() / 8);
    for (size_t i = 0; i < out.size(); ++i) {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<uint64_t>(bytes[i * 8 + b]) << (8 * b);
        std::memcpy(&out[i], &bits, 8);
    }
    return out;
}

nlohmann::json param_set_to_json(const ParameterSet& params) {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json p = nlohmann::json::object();
    for (const auto& [path, t] : params.all()) {
        p[path] = {{"shape", t.shape()}, {"data", doubles_to_base64(t.data())}};
    }
    j["params"] = std::move(p);
    j["frozen"] = std::vector<std::string>(params.frozen().begin(), params.frozen().end());
    return j;
}

ParameterSet param_set_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || j.at("version").get<int>() != 1) {
        throw IoError("checkpoint: unsupported version");
    }
    ParameterSet out;
    for (const auto& [path, entry] : j.at("params").items()) {
        Shape shape = entry.at("shape").get<Shape>();
        std::vector<double> data = base64_to_doubles(entry.at("data").get<std::string>());
        out.create(path, shape, std::move(data));
    }
    for (const auto& f : j.at("frozen")) out.freeze(f.get<std::string>());
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace peftdml
