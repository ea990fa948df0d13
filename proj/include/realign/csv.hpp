#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "realign/tensor.hpp"

namespace realign::csv {

/// Stable decimal formatting: %.12g, "." decimal point, no locale effects.
inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

/// UTF-8 CSV with a header row. Field values are written verbatim; the
/// schemas used by the pipeline never need quoting.
class Writer {
public:
    Writer(const std::string& path, const std::vector<std::string>& header)
        : f_(path, std::ios::trunc) {
        if (!f_) throw DataError("csv: cannot open for writing: " + path);
        row(header);
    }

    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) f_ << ',';
            f_ << fields[i];
        }
        f_ << '\n';
    }

private:
    std::ofstream f_;
};

}  // namespace realign::csv
