#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ga/common.hpp"

// Minimal strict CSV layer for the toolkit's file contracts. No quoting: the
// contracts only carry identifiers and numbers. Every diagnostic names the
// file and the 1-based row.

namespace ga::csvio {

struct Row {
    std::vector<std::string> fields;
    std::size_t line_no = 0;
};

class Reader {
public:
    Reader(const std::filesystem::path& path, const std::vector<std::string>& expected_header)
        : path_(path.string()), in_(path) {
        if (!in_) throw ValidationError("cannot open file: " + path_);
        Row header;
        if (!read_raw(header)) throw ValidationError(path_ + ": empty file, expected header");
        if (header.fields != expected_header) {
            throw ValidationError(path_ + ":1: unexpected header '" + join(header.fields) +
                                  "', expected '" + join(expected_header) + "'");
        }
        n_columns_ = expected_header.size();
    }

    bool next(Row& row) {
        if (!read_raw(row)) return false;
        if (row.fields.size() != n_columns_) {
            fail(row.line_no, "expected " + std::to_string(n_columns_) + " fields, got " +
                                  std::to_string(row.fields.size()));
        }
        return true;
    }

    [[noreturn]] void fail(std::size_t line_no, const std::string& msg) const {
        throw ValidationError(path_ + ":" + std::to_string(line_no) + ": " + msg);
    }

    double parse_double(const Row& row, std::size_t col) const {
        const std::string& f = row.fields[col];
        char* end = nullptr;
        const double v = std::strtod(f.c_str(), &end);
        if (f.empty() || end != f.c_str() + f.size()) {
            fail(row.line_no, "not a number: '" + f + "'");
        }
        return v;
    }

    long parse_long(const Row& row, std::size_t col) const {
        const std::string& f = row.fields[col];
        long v = 0;
        auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
        if (ec != std::errc{} || p != f.data() + f.size()) {
            fail(row.line_no, "not an integer: '" + f + "'");
        }
        return v;
    }

    // Blank field = missing.
    std::optional<double> parse_opt_double(const Row& row, std::size_t col) const {
        if (row.fields[col].empty()) return std::nullopt;
        return parse_double(row, col);
    }

    std::optional<long> parse_opt_long(const Row& row, std::size_t col) const {
        if (row.fields[col].empty()) return std::nullopt;
        return parse_long(row, col);
    }

    const std::string& path() const { return path_; }

private:
    bool read_raw(Row& row) {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_no_;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            row.fields.clear();
            row.line_no = line_no_;
            std::size_t start = 0;
            while (true) {
                const std::size_t pos = line.find(',', start);
                if (pos == std::string::npos) {
                    row.fields.push_back(line.substr(start));
                    break;
                }
                row.fields.push_back(line.substr(start, pos - start));
                start = pos + 1;
            }
            return true;
        }
        return false;
    }

    static std::string join(const std::vector<std::string>& fields) {
        std::string out;
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out += ',';
            out += fields[i];
        }
        return out;
    }

    std::string path_;
    std::ifstream in_;
    std::size_t line_no_ = 0;
    std::size_t n_columns_ = 0;
};

// Round-trip exact double formatting.
inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string num(std::optional<double> v) {
    return v ? num(*v) : std::string();
}

class Writer {
public:
    Writer(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path) {
        if (!out_) throw Error("cannot write file: " + path.string());
        row(header);
    }

    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << fields[i];
        }
        out_ << '\n';
    }

    void close() { out_.close(); }

private:
    std::ofstream out_;
};

}  // namespace ga::csvio
