#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rgtn/tensor.hpp"

namespace rgtn {

// Little-endian binary writer/reader for the dataset and checkpoint files.
// All integers are fixed-width little-endian; reals are IEEE-754 binary64,
// so round-trips are bit-exact.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open for writing: " + path);
    }

    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i64(std::int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }

    void magic(const char m[9]) { raw(m, 8); }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }

    void f64_array(const double* p, std::size_t n) { raw(p, n * 8); }

    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) i64(d);
        f64_array(t.data(), static_cast<std::size_t>(t.numel()));
    }

    void close() {
        out_.close();
        if (!out_) throw std::runtime_error("write failed: " + path_);
    }

private:
    void raw(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw std::runtime_error("write failed: " + path_);
    }

    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("cannot open for reading: " + path);
    }

    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
    std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }

    void expect_magic(const char m[9]) {
        char buf[8];
        raw(buf, 8);
        if (std::memcmp(buf, m, 8) != 0)
            throw std::runtime_error(path_ + ": bad magic, expected " + std::string(m, 8));
    }

    std::string str() {
        std::uint32_t n = u32();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    void f64_array(double* p, std::size_t n) { raw(p, n * 8); }

    std::pair<std::string, Tensor> tensor() {
        std::string name = str();
        std::uint32_t rank = u32();
        Shape shape(rank);
        for (auto& d : shape) d = i64();
        Tensor t(shape);
        f64_array(t.data(), static_cast<std::size_t>(t.numel()));
        return {name, std::move(t)};
    }

private:
    void raw(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) throw std::runtime_error("unexpected end of file: " + path_);
    }

    std::string path_;
    std::ifstream in_;
};

// ---------------------------------------------------------------------------
// Sectioned key/value text files (.cfg). Format:
//
//   [section]
//   key = value
//   # comment
//   bare record line        (whitespace-separated fields, kept in order)
//
// Sections hold both key=value pairs and ordered record lines; topology,
// manifest and train-config files all use this shape.
// ---------------------------------------------------------------------------

struct CfgSection {
    std::map<std::string, std::string> values;
    std::vector<std::vector<std::string>> records;

    bool has(const std::string& key) const { return values.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end()) throw std::runtime_error("missing config key: " + key);
        return it->second;
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }

    double get_f64(const std::string& key) const { return std::stod(get(key)); }
    std::int64_t get_i64(const std::string& key) const { return std::stoll(get(key)); }
    std::uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }
};

class CfgFile {
public:
    static CfgFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    static CfgFile parse(const std::string& text, const std::string& origin = "<string>") {
        CfgFile cfg;
        cfg.raw_ = text;
        std::istringstream in(text);
        std::string line;
        std::string section = "";
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#') continue;
            if (s.front() == '[' && s.back() == ']') {
                section = strip(s.substr(1, s.size() - 2));
                cfg.order_.push_back(section);
                cfg.sections_[section];
                continue;
            }
            auto eq = s.find('=');
            if (eq != std::string::npos) {
                std::string key = strip(s.substr(0, eq));
                std::string value = strip(s.substr(eq + 1));
                if (key.empty())
                    throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                             ": empty key");
                cfg.sections_[section].values[key] = value;
            } else {
                std::vector<std::string> fields;
                std::istringstream fs(s);
                std::string f;
                while (fs >> f) fields.push_back(f);
                cfg.sections_[section].records.push_back(std::move(fields));
            }
        }
        return cfg;
    }

    bool has_section(const std::string& name) const { return sections_.count(name) != 0; }

    const CfgSection& section(const std::string& name) const {
        auto it = sections_.find(name);
        if (it == sections_.end())
            throw std::runtime_error("missing config section: [" + name + "]");
        return it->second;
    }

    const std::string& raw_text() const { return raw_; }

private:
    static std::string strip(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::string raw_;
    std::map<std::string, CfgSection> sections_;
    std::vector<std::string> order_;
};

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Fixed-precision decimal formatting for CSV output.
inline std::string fmt_f64(double v, int digits = 6) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

}  // namespace rgtn
