#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "iml/errors.hpp"
#include "iml/tasks.hpp"

namespace iml {

// Episode file: header {magic "IMLT", u32 version 1, u32 count}, then per
// task a kind tag, dimensions, row-major float64 arrays, and labels as
// little-endian u32. Round-trips are bit-exact.
namespace episode_detail {

constexpr char kMagic[4] = {'I', 'M', 'L', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    }

    void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }

    void u32(std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b, 4);
    }

    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        out_.write(b, 8);
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    void doubles(const std::vector<double>& vs) {
        for (double v : vs) f64(v);
    }

    void labels(const std::vector<double>& vs) {
        for (double v : vs) u32(static_cast<std::uint32_t>(v));
    }

    void close() {
        out_.flush();
        if (!out_) throw IoError("write failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open " + path.string() + " for reading");
    }

    std::size_t offset() const { return offset_; }

    std::uint8_t u8() {
        char c;
        take(&c, 1);
        return static_cast<std::uint8_t>(c);
    }

    std::uint32_t u32() {
        char b[4];
        take(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        }
        return v;
    }

    double f64() {
        char b[8];
        take(b, 8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        }
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }

    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        if (n > 0) take(s.data(), n);
        return s;
    }

    [[noreturn]] void fail(const std::string& why) const {
        throw ParseError(why + " at byte " + std::to_string(offset_));
    }

private:
    void take(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            fail("unexpected end of file");
        }
        offset_ += n;
    }

    std::ifstream in_;
    std::size_t offset_ = 0;
};

}  // namespace episode_detail

inline void write_tasks(const std::filesystem::path& path, std::span<const Task> tasks) {
    episode_detail::Writer w(path);
    for (char c : episode_detail::kMagic) w.u8(static_cast<std::uint8_t>(c));
    w.u32(episode_detail::kVersion);
    w.u32(static_cast<std::uint32_t>(tasks.size()));
    for (const Task& t : tasks) {
        t.validate();
        w.u8(t.kind == TaskKind::Regression ? 0 : 1);
        w.str(t.origin);
        if (t.kind == TaskKind::Classification) {
            w.u32(static_cast<std::uint32_t>(t.n_way));
            w.u32(static_cast<std::uint32_t>(t.k_shot));
            w.u32(static_cast<std::uint32_t>(t.q_per_class));
            w.u32(static_cast<std::uint32_t>(t.support_x.cols()));
            w.doubles(t.support_x.values());
            w.labels(t.support_y.values());
            w.doubles(t.query_x.values());
            w.labels(t.query_y.values());
        } else {
            w.u32(static_cast<std::uint32_t>(t.support_x.rows()));
            w.u32(static_cast<std::uint32_t>(t.query_x.rows()));
            w.u32(static_cast<std::uint32_t>(t.support_x.cols()));
            w.u32(static_cast<std::uint32_t>(t.support_y.cols()));
            w.doubles(t.support_x.values());
            w.doubles(t.support_y.values());
            w.doubles(t.query_x.values());
            w.doubles(t.query_y.values());
        }
    }
    w.close();
}

inline std::vector<Task> read_tasks(const std::filesystem::path& path) {
    episode_detail::Reader r(path);
    for (char expect : episode_detail::kMagic) {
        if (static_cast<char>(r.u8()) != expect) r.fail("bad magic");
    }
    if (r.u32() != episode_detail::kVersion) r.fail("unsupported version");
    const std::uint32_t count = r.u32();

    std::vector<Task> tasks;
    tasks.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Task t;
        const std::uint8_t kind = r.u8();
        if (kind > 1) r.fail("bad kind tag " + std::to_string(kind));
        t.kind = kind == 0 ? TaskKind::Regression : TaskKind::Classification;
        t.origin = r.str();

        auto read_doubles = [&](std::size_t rows, std::size_t cols) {
            Tensor out(Shape{rows, cols});
            for (std::size_t k = 0; k < out.numel(); ++k) out[k] = r.f64();
            return out;
        };
        auto read_labels = [&](std::size_t rows) {
            Tensor out(Shape{rows});
            for (std::size_t k = 0; k < rows; ++k) out[k] = static_cast<double>(r.u32());
            return out;
        };

        if (t.kind == TaskKind::Classification) {
            t.n_way = static_cast<int>(r.u32());
            t.k_shot = static_cast<int>(r.u32());
            t.q_per_class = static_cast<int>(r.u32());
            const std::uint32_t d = r.u32();
            if (t.n_way < 2 || t.k_shot < 1 || t.q_per_class < 1 || d == 0) {
                r.fail("bad classification dimensions");
            }
            const std::size_t sup = static_cast<std::size_t>(t.n_way) * t.k_shot;
            const std::size_t qry = static_cast<std::size_t>(t.n_way) * t.q_per_class;
            t.support_x = read_doubles(sup, d);
            t.support_y = read_labels(sup);
            t.query_x = read_doubles(qry, d);
            t.query_y = read_labels(qry);
        } else {
            const std::uint32_t k = r.u32();
            const std::uint32_t q = r.u32();
            const std::uint32_t xd = r.u32();
            const std::uint32_t yd = r.u32();
            if (k == 0 || q == 0 || xd == 0 || yd == 0) r.fail("bad regression dimensions");
            t.k_shot = static_cast<int>(k);
            t.support_x = read_doubles(k, xd);
            t.support_y = read_doubles(k, yd);
            t.query_x = read_doubles(q, xd);
            t.query_y = read_doubles(q, yd);
        }
        try {
            t.validate();
        } catch (const ConfigError& e) {
            r.fail(std::string("invalid task: ") + e.what());
        }
        tasks.push_back(std::move(t));
    }
    return tasks;
}

}  // namespace iml
