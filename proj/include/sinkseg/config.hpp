#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "scene.hpp"
#include "train.hpp"

namespace sinkseg {

// One experiment description: everything that affects results lives here so
// the manifest can capture it completely. Output locations are plumbing and
// stay outside.
struct RunConfig {
    std::string mode = "inductive";  // inductive | transductive | fully-supervised
    SceneConfig scene;               // per-run seed comes from `seeds`, not scene.seed
    TrainConfig train;               // decoder dims are derived from the scene
    std::vector<std::uint64_t> seeds{0};
    bool export_scoremaps = false;
    bool export_scene = false;
    bool export_checkpoint = false;

    // Ties the decoder to the scene dims, then validates every field.
    void finalize() {
        if (mode != "inductive" && mode != "transductive" && mode != "fully-supervised")
            throw ConfigError("mode: expected inductive, transductive, or fully-supervised");
        if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
        train.dec.K = scene.K;
        train.dec.N = scene.N;
        train.dec.hi = scene.HI;
        train.dec.wi = scene.WI;
        scene.validate();
        train.validate();
    }
};

namespace detail {

inline std::string trim(const std::string &s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline int parse_int(const std::string &path, const std::string &v) {
    std::size_t used = 0;
    int out = 0;
    try {
        out = std::stoi(v, &used);
    } catch (const std::exception &) {
        throw ConfigError(path + ": expected integer, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(path + ": expected integer, got '" + v + "'");
    return out;
}

inline double parse_double(const std::string &path, const std::string &v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception &) {
        throw ConfigError(path + ": expected number, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(path + ": expected number, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string &path, const std::string &v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(path + ": expected true or false, got '" + v + "'");
}

inline AttnKind parse_attn(const std::string &path, const std::string &v) {
    if (v == "mpsa") return AttnKind::mpsa;
    if (v == "softmax") return AttnKind::softmax;
    throw ConfigError(path + ": expected mpsa or softmax, got '" + v + "'");
}

} // namespace detail

// Seed lists accept a single value, a comma list ("0,3,7"), or an inclusive
// range ("0..4").
inline std::vector<std::uint64_t> parse_seed_list(const std::string &text) {
    const std::string v = detail::trim(text);
    if (v.empty()) throw ConfigError("seeds: empty list");
    std::vector<std::uint64_t> out;
    auto parse_one = [](const std::string &tok) {
        const std::string t = detail::trim(tok);
        std::size_t used = 0;
        std::uint64_t s = 0;
        try {
            s = std::stoull(t, &used);
        } catch (const std::exception &) {
            throw ConfigError("seeds: expected integer, got '" + t + "'");
        }
        if (used != t.size()) throw ConfigError("seeds: expected integer, got '" + t + "'");
        return s;
    };
    if (const auto dots = v.find(".."); dots != std::string::npos) {
        const std::uint64_t lo = parse_one(v.substr(0, dots));
        const std::uint64_t hi = parse_one(v.substr(dots + 2));
        if (hi < lo) throw ConfigError("seeds: descending range '" + v + "'");
        if (hi - lo >= 4096) throw ConfigError("seeds: range wider than 4096");
        for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
        return out;
    }
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_one(tok));
    return out;
}

namespace detail {

inline void apply_kv(RunConfig &rc, const std::string &section, const std::string &key,
                     const std::string &value) {
    const std::string path = section.empty() ? key : section + "." + key;
    if (section.empty()) {
        if (key == "mode")
            rc.mode = value;
        else if (key == "seeds")
            rc.seeds = parse_seed_list(value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "scene") {
        if (key == "K")
            rc.scene.K = parse_int(path, value);
        else if (key == "N")
            rc.scene.N = parse_int(path, value);
        else if (key == "D")
            rc.scene.D = parse_int(path, value);
        else if (key == "H")
            rc.scene.H = parse_int(path, value);
        else if (key == "W")
            rc.scene.W = parse_int(path, value);
        else if (key == "H_I")
            rc.scene.HI = parse_int(path, value);
        else if (key == "W_I")
            rc.scene.WI = parse_int(path, value);
        else if (key == "noise")
            rc.scene.noise = parse_double(path, value);
        else if (key == "prompt_spread")
            rc.scene.prompt_spread = parse_double(path, value);
        else if (key == "n_seen")
            rc.scene.n_seen = parse_int(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "sinkhorn") {
        if (key == "epsilon")
            rc.train.dec.sink.epsilon = parse_double(path, value);
        else if (key == "iters")
            rc.train.dec.sink.max_iters = parse_int(path, value);
        else if (key == "tol")
            rc.train.dec.sink.tol = parse_double(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "decoder") {
        if (key == "layers")
            rc.train.dec.layers = parse_int(path, value);
        else if (key == "d")
            rc.train.dec.d = parse_int(path, value);
        else if (key == "ffn_mult")
            rc.train.dec.ffn_mult = parse_int(path, value);
        else if (key == "attention")
            rc.train.dec.attn = parse_attn(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "train") {
        if (key == "steps")
            rc.train.steps = parse_int(path, value);
        else if (key == "lambda")
            rc.train.lambda = parse_double(path, value);
        else if (key == "pseudo_threshold")
            rc.train.pseudo_threshold = parse_double(path, value);
        else if (key == "pseudo_every")
            rc.train.pseudo_every = parse_int(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "loss") {
        if (key == "ce")
            rc.train.loss.lambda_ce = parse_double(path, value);
        else if (key == "focal")
            rc.train.loss.lambda_focal = parse_double(path, value);
        else if (key == "dice")
            rc.train.loss.lambda_dice = parse_double(path, value);
        else if (key == "gamma")
            rc.train.loss.gamma = parse_double(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "optimizer") {
        if (key == "lr")
            rc.train.opt.lr = parse_double(path, value);
        else if (key == "weight_decay")
            rc.train.opt.weight_decay = parse_double(path, value);
        else if (key == "beta1")
            rc.train.opt.beta1 = parse_double(path, value);
        else if (key == "beta2")
            rc.train.opt.beta2 = parse_double(path, value);
        else if (key == "eps")
            rc.train.opt.eps = parse_double(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else if (section == "export") {
        if (key == "scoremaps")
            rc.export_scoremaps = parse_bool(path, value);
        else if (key == "scene")
            rc.export_scene = parse_bool(path, value);
        else if (key == "checkpoint")
            rc.export_checkpoint = parse_bool(path, value);
        else
            throw ConfigError(path + ": unknown key");
    } else {
        throw ConfigError("[" + section + "]: unknown section");
    }
}

} // namespace detail

// TOML-style key = value with [section] headers and # comments. Values are
// bare tokens (no quoting); later assignments win. finalize() is left to the
// caller so flag overrides can land on top first.
inline RunConfig parse_run_config_text(const std::string &text) {
    RunConfig rc;
    std::stringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        detail::apply_kv(rc, section, key, value);
    }
    return rc;
}

inline RunConfig parse_run_config_file(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config: " + path.string());
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_run_config_text(buf.str());
}

} // namespace sinkseg
