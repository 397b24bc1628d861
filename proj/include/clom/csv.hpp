#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "clom/errors.hpp"

namespace clom {

// All report CSVs: one comment line with the config hash and seed, a header
// row, then data rows with reals at 6 decimal places.

inline std::string format_f6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::string& header,
              uint64_t config_hash, uint64_t seed)
        : os_(path) {
        if (!os_) throw IoError("csv: cannot open for writing: " + path);
        os_ << "# config_hash=" << hash_hex(config_hash) << " seed=" << seed << "\n";
        os_ << header << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) os_ << ",";
            os_ << cells[i];
        }
        os_ << "\n";
    }

    ~CsvWriter() = default;

private:
    std::ofstream os_;
};

}  // namespace clom
