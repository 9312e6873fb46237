#include "segkit/common.hpp"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>

namespace segkit {

LogLevel log_level() {
    static LogLevel cached = [] {
        const char* env = std::getenv("SEGKIT_LOG");
        if (env == nullptr) return LogLevel::warn;
        std::string_view v{env};
        if (v == "debug") return LogLevel::debug;
        if (v == "info") return LogLevel::info;
        if (v == "warn") return LogLevel::warn;
        if (v == "error") return LogLevel::error;
        if (v == "off") return LogLevel::off;
        return LogLevel::warn;
    }();
    return cached;
}

void log_msg(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) < static_cast<int>(log_level())) return;
    static std::mutex mu;
    static const char* names[] = {"debug", "info", "warn", "error"};
    std::lock_guard<std::mutex> lock{mu};
    std::fprintf(stderr, "[segkit:%s] %s\n", names[static_cast<int>(level)], msg.c_str());
}

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string file_checksum(const std::filesystem::path& p) {
    const std::string bytes = read_file(p);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out{tmp, std::ios::binary};
        if (!out) throw DataError("cannot open for writing: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw DataError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) throw DataError("cannot open: " + path.string());
    std::string out{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (in.bad()) throw DataError("read failed: " + path.string());
    return out;
}

}  // namespace segkit
