#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "decoder.hpp"
#include "scene.hpp"

namespace sinkseg {

// Shortest round-trippable decimal form; used for every number that lands in
// a text artifact so identical runs produce byte-identical files.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline void put_u32(std::ostream &os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline void put_u64(std::ostream &os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffu));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64(std::ostream &os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(std::istream &is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char *>(b), 4);
    if (!is) throw IoError("binary read: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream &is) {
    const std::uint64_t lo = get_u32(is);
    return lo | (static_cast<std::uint64_t>(get_u32(is)) << 32);
}

inline double get_f64(std::istream &is) { return std::bit_cast<double>(get_u64(is)); }

inline void put_mat(std::ostream &os, const Mat &m) {
    for (double v : m.data) put_f64(os, v);
}

inline void get_mat(std::istream &is, Mat &m) {
    for (double &v : m.data) v = get_f64(is);
}

inline std::ofstream open_out(const std::filesystem::path &path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return is;
}

inline void expect_magic(std::istream &is, const char (&magic)[5], const char *what) {
    char got[4];
    is.read(got, 4);
    if (!is || got[0] != magic[0] || got[1] != magic[1] || got[2] != magic[2] ||
        got[3] != magic[3])
        throw IoError(std::string(what) + ": bad magic");
}

} // namespace detail

// 8-bit binary PGM (P5), min-max scaled. The affine scale is recorded in a
// sidecar "<path>.scale.txt" so raw values can be recovered; a constant image
// writes as all zeros with min == max in the sidecar.
inline void write_pgm(const std::filesystem::path &path, const Mat &img) {
    double lo = img.data.empty() ? 0.0 : img.data[0];
    double hi = lo;
    for (double v : img.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    auto os = detail::open_out(path);
    os << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    const double span = hi - lo;
    for (double v : img.data) {
        const double t = span > 0.0 ? (v - lo) / span : 0.0;
        os.put(static_cast<char>(static_cast<int>(t * 255.0 + 0.5)));
    }
    if (!os) throw IoError("write failed: " + path.string());
    auto side = detail::open_out(path.string() + ".scale.txt");
    side << "min " << fmt_double(lo) << "\nmax " << fmt_double(hi) << "\n";
    if (!side) throw IoError("write failed: " + path.string() + ".scale.txt");
}

// Rows of already-formatted cells; numbers go through fmt_double upstream.
// Written in binary mode so line endings are LF everywhere.
inline void write_csv(const std::filesystem::path &path, const std::vector<std::string> &header,
                      const std::vector<std::vector<std::string>> &rows) {
    auto os = detail::open_out(path);
    auto put_row = [&os](const std::vector<std::string> &cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os << ",";
            os << cells[i];
        }
        os << "\n";
    };
    put_row(header);
    for (const auto &r : rows) put_row(r);
    if (!os) throw IoError("write failed: " + path.string());
}

// Scene container: magic "SSCN", format version, grid dims and seed, then
// row-major little-endian doubles (prototypes, prompt embeddings, pixels,
// global token), int32 grid and ground-truth labels, and the per-class seen
// byte mask.
inline void write_scene(const std::filesystem::path &path, const ToyScene &scene,
                        const EmbeddingBundle &bundle) {
    auto os = detail::open_out(path);
    os.write("SSCN", 4);
    detail::put_u32(os, 1);
    for (int v : {scene.K, bundle.N, bundle.D, scene.H, scene.W, scene.HI, scene.WI})
        detail::put_u32(os, static_cast<std::uint32_t>(v));
    detail::put_u64(os, scene.seed);
    detail::put_mat(os, scene.prototypes);
    detail::put_mat(os, bundle.text);
    detail::put_mat(os, scene.pixels);
    detail::put_mat(os, bundle.global_token);
    for (int v : scene.grid_labels) detail::put_u32(os, static_cast<std::uint32_t>(v));
    for (int v : scene.labels) detail::put_u32(os, static_cast<std::uint32_t>(v));
    for (char v : scene.seen_mask) os.put(v ? 1 : 0);
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::pair<ToyScene, EmbeddingBundle> read_scene(const std::filesystem::path &path) {
    auto is = detail::open_in(path);
    detail::expect_magic(is, "SSCN", "scene file");
    if (detail::get_u32(is) != 1) throw IoError("scene file: unsupported version");
    const int K = static_cast<int>(detail::get_u32(is));
    const int N = static_cast<int>(detail::get_u32(is));
    const int D = static_cast<int>(detail::get_u32(is));
    const int H = static_cast<int>(detail::get_u32(is));
    const int W = static_cast<int>(detail::get_u32(is));
    const int HI = static_cast<int>(detail::get_u32(is));
    const int WI = static_cast<int>(detail::get_u32(is));
    if (K < 1 || N < 1 || D < 1 || H < 1 || W < 1 || HI < H || WI < W)
        throw IoError("scene file: implausible dimensions");
    ToyScene scene;
    EmbeddingBundle bundle;
    scene.K = K;
    scene.H = H;
    scene.W = W;
    scene.HI = HI;
    scene.WI = WI;
    scene.seed = detail::get_u64(is);
    scene.prototypes = Mat(K, D);
    bundle.text = Mat(K * N, D);
    scene.pixels = Mat(H * W, D);
    bundle.global_token = Mat(1, D);
    detail::get_mat(is, scene.prototypes);
    detail::get_mat(is, bundle.text);
    detail::get_mat(is, scene.pixels);
    detail::get_mat(is, bundle.global_token);
    scene.grid_labels.resize(static_cast<std::size_t>(H) * W);
    for (int &v : scene.grid_labels) v = static_cast<int>(detail::get_u32(is));
    scene.labels.resize(static_cast<std::size_t>(HI) * WI);
    for (int &v : scene.labels) v = static_cast<int>(detail::get_u32(is));
    scene.seen_mask.resize(static_cast<std::size_t>(K));
    for (char &v : scene.seen_mask) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw IoError("scene file: truncated");
        v = static_cast<char>(c != 0);
    }
    bundle.pixels = scene.pixels;
    bundle.K = K;
    bundle.N = N;
    bundle.D = D;
    bundle.H = H;
    bundle.W = W;
    bundle.validate();
    for (int v : scene.grid_labels)
        if (v < 0 || v >= K) throw IoError("scene file: grid label out of range");
    for (int v : scene.labels)
        if (v < 0 || v >= K) throw IoError("scene file: label out of range");
    return {std::move(scene), std::move(bundle)};
}

// Checkpoint: magic "SCKP", format version, parameter count, then each
// parameter as rows, cols, row-major little-endian doubles, in the stable
// parameter order used by the optimizer.
inline void write_checkpoint(const std::filesystem::path &path, const PipelineParams &params) {
    const auto refs = param_refs(params);
    auto os = detail::open_out(path);
    os.write("SCKP", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(refs.size()));
    for (const Mat *m : refs) {
        detail::put_u32(os, static_cast<std::uint32_t>(m->rows));
        detail::put_u32(os, static_cast<std::uint32_t>(m->cols));
        detail::put_mat(os, *m);
    }
    if (!os) throw IoError("write failed: " + path.string());
}

// Fills an already-shaped parameter set (e.g. from pipeline_init); shape
// mismatches indicate a checkpoint from a different configuration.
inline void read_checkpoint(const std::filesystem::path &path, PipelineParams &params) {
    const auto refs = param_refs(params);
    auto is = detail::open_in(path);
    detail::expect_magic(is, "SCKP", "checkpoint");
    if (detail::get_u32(is) != 1) throw IoError("checkpoint: unsupported version");
    if (detail::get_u32(is) != refs.size()) throw IoError("checkpoint: parameter count mismatch");
    for (Mat *m : refs) {
        const int rows = static_cast<int>(detail::get_u32(is));
        const int cols = static_cast<int>(detail::get_u32(is));
        if (rows != m->rows || cols != m->cols)
            throw IoError("checkpoint: parameter shape mismatch");
        detail::get_mat(is, *m);
    }
}

} // namespace sinkseg
