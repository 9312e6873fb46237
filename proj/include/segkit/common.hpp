#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace segkit {

// ----------------------------- error taxonomy -----------------------------
// ShapeError   — tensor/bitmap dimension contract violations
// FormatError  — malformed external data (CSV, RLE, image files)
// DataError    — filesystem / IO failures
// ConfigError  — invalid configuration values
// NumericError — NaN/Inf or failed numeric checks at runtime

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// ----------------------------- logging -----------------------------
// Level comes from SEGKIT_LOG: debug|info|warn|error|off (default warn).

enum class LogLevel : int { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

LogLevel log_level();
void log_msg(LogLevel level, const std::string& msg);

inline void log_debug(const std::string& m) { log_msg(LogLevel::debug, m); }
inline void log_info(const std::string& m) { log_msg(LogLevel::info, m); }
inline void log_warn(const std::string& m) { log_msg(LogLevel::warn, m); }
inline void log_error(const std::string& m) { log_msg(LogLevel::error, m); }

// ----------------------------- misc -----------------------------

/// Format a double with 6 significant digits (the CSV convention used
/// by every metrics/report writer in this project).
std::string fmt6(double v);

/// FNV-1a 64-bit over a byte range.
std::uint64_t fnv1a64(const void* data, std::size_t n);

/// FNV-1a of a whole file, as 16 hex digits. Throws DataError if unreadable.
std::string file_checksum(const std::filesystem::path& p);

/// Write `content` to `path` atomically (tmp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// Read a whole file into a string. Throws DataError.
std::string read_file(const std::filesystem::path& path);

}  // namespace segkit
