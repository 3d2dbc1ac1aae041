#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "skiplab/errors.hpp"

namespace skiplab {

// Deterministic double formatting for CSV cells: shortest %.12g form, so
// identical doubles always print identically.
inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// Minimal CSV emitter: one schema header line, then rows. Cells are written
// verbatim; callers keep commas out of them.
class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : os_(path) {
        if (!os_) throw InputError("cannot open for writing: " + path);
        write_row(header);
    }

    void write_row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os_ << ',';
            os_ << cells[i];
        }
        os_ << '\n';
    }

  private:
    std::ofstream os_;
};

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline void ensure_dir(const std::filesystem::path& p) {
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec) throw InputError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace skiplab
