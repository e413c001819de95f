#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sinkseg/checks.hpp"
#include "sinkseg/config.hpp"
#include "sinkseg/dispersion.hpp"
#include "sinkseg/io.hpp"
#include "sinkseg/train.hpp"
#include "sinkseg/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sinkseg;

namespace {

// Flag values sit on top of the config file; only flags the user actually
// passed overwrite file values.
struct Overrides {
    std::optional<std::string> mode, seeds, attention;
    std::optional<int> K, N, D, H, W, HI, WI, n_seen;
    std::optional<double> noise, prompt_spread;
    std::optional<double> epsilon, sink_tol;
    std::optional<int> sink_iters;
    std::optional<int> layers, attn_dim, ffn_mult;
    std::optional<int> steps, pseudo_every;
    std::optional<double> lambda, pseudo_threshold;
    std::optional<double> loss_ce, loss_focal, loss_dice, gamma;
    std::optional<double> lr, weight_decay, beta1, beta2, opt_eps;
    bool export_scoremaps = false, export_scene = false, export_checkpoint = false;
};

// Every flag mirrors a config key so experiments can be described either way.
void add_config_flags(CLI::App &cmd, std::optional<std::string> &config_path, Overrides &ov) {
    cmd.add_option("--config", config_path, "config file (key = value with [section] headers)");
    cmd.add_option("--mode", ov.mode, "inductive | transductive | fully-supervised");
    cmd.add_option("--seeds", ov.seeds, "seed list: 7, 0,3,9, or 0..4");
    cmd.add_option("--K", ov.K, "class count");
    cmd.add_option("--N", ov.N, "prompts per class");
    cmd.add_option("--D", ov.D, "embedding dim");
    cmd.add_option("--H", ov.H, "feature grid height");
    cmd.add_option("--W", ov.W, "feature grid width");
    cmd.add_option("--H-I", ov.HI, "label grid height");
    cmd.add_option("--W-I", ov.WI, "label grid width");
    cmd.add_option("--noise", ov.noise, "pixel noise level");
    cmd.add_option("--prompt-spread", ov.prompt_spread, "prompt jitter around the prototype");
    cmd.add_option("--n-seen", ov.n_seen, "number of seen classes");
    cmd.add_option("--epsilon", ov.epsilon, "entropic regularization weight");
    cmd.add_option("--sinkhorn-iters", ov.sink_iters, "plan iteration count");
    cmd.add_option("--sinkhorn-tol", ov.sink_tol, "marginal stopping tolerance");
    cmd.add_option("--layers", ov.layers, "decoder depth");
    cmd.add_option("--attn-dim", ov.attn_dim, "attention width d");
    cmd.add_option("--ffn-mult", ov.ffn_mult, "feed-forward expansion");
    cmd.add_option("--attention", ov.attention, "decoder attention: mpsa | softmax");
    cmd.add_option("--steps", ov.steps, "training steps");
    cmd.add_option("--lambda", ov.lambda, "ensemble balance in [0,1]");
    cmd.add_option("--pseudo-threshold", ov.pseudo_threshold, "self-training confidence gate");
    cmd.add_option("--pseudo-every", ov.pseudo_every, "pseudo-label refresh period");
    cmd.add_option("--loss-ce", ov.loss_ce, "cross-entropy weight");
    cmd.add_option("--loss-focal", ov.loss_focal, "focal weight");
    cmd.add_option("--loss-dice", ov.loss_dice, "dice weight");
    cmd.add_option("--gamma", ov.gamma, "focal exponent");
    cmd.add_option("--lr", ov.lr, "optimizer step size");
    cmd.add_option("--weight-decay", ov.weight_decay, "decoupled weight decay");
    cmd.add_option("--beta1", ov.beta1, "first-moment decay");
    cmd.add_option("--beta2", ov.beta2, "second-moment decay");
    cmd.add_option("--opt-eps", ov.opt_eps, "optimizer denominator floor");
    cmd.add_flag("--export-scoremaps", ov.export_scoremaps, "write per-prompt score-map PGMs");
    cmd.add_flag("--export-scene", ov.export_scene, "write the planted scene container");
    cmd.add_flag("--export-checkpoint", ov.export_checkpoint, "write trained parameters");
}

RunConfig build_config(const std::optional<std::string> &config_path, const Overrides &ov) {
    RunConfig rc;
    if (config_path) rc = parse_run_config_file(*config_path);
    if (ov.mode) rc.mode = *ov.mode;
    if (ov.seeds) rc.seeds = parse_seed_list(*ov.seeds);
    if (ov.K) rc.scene.K = *ov.K;
    if (ov.N) rc.scene.N = *ov.N;
    if (ov.D) rc.scene.D = *ov.D;
    if (ov.H) rc.scene.H = *ov.H;
    if (ov.W) rc.scene.W = *ov.W;
    if (ov.HI) rc.scene.HI = *ov.HI;
    if (ov.WI) rc.scene.WI = *ov.WI;
    if (ov.noise) rc.scene.noise = *ov.noise;
    if (ov.prompt_spread) rc.scene.prompt_spread = *ov.prompt_spread;
    if (ov.n_seen) rc.scene.n_seen = *ov.n_seen;
    if (ov.epsilon) rc.train.dec.sink.epsilon = *ov.epsilon;
    if (ov.sink_iters) rc.train.dec.sink.max_iters = *ov.sink_iters;
    if (ov.sink_tol) rc.train.dec.sink.tol = *ov.sink_tol;
    if (ov.layers) rc.train.dec.layers = *ov.layers;
    if (ov.attn_dim) rc.train.dec.d = *ov.attn_dim;
    if (ov.ffn_mult) rc.train.dec.ffn_mult = *ov.ffn_mult;
    if (ov.attention) rc.train.dec.attn = detail::parse_attn("decoder.attention", *ov.attention);
    if (ov.steps) rc.train.steps = *ov.steps;
    if (ov.lambda) rc.train.lambda = *ov.lambda;
    if (ov.pseudo_threshold) rc.train.pseudo_threshold = *ov.pseudo_threshold;
    if (ov.pseudo_every) rc.train.pseudo_every = *ov.pseudo_every;
    if (ov.loss_ce) rc.train.loss.lambda_ce = *ov.loss_ce;
    if (ov.loss_focal) rc.train.loss.lambda_focal = *ov.loss_focal;
    if (ov.loss_dice) rc.train.loss.lambda_dice = *ov.loss_dice;
    if (ov.gamma) rc.train.loss.gamma = *ov.gamma;
    if (ov.lr) rc.train.opt.lr = *ov.lr;
    if (ov.weight_decay) rc.train.opt.weight_decay = *ov.weight_decay;
    if (ov.beta1) rc.train.opt.beta1 = *ov.beta1;
    if (ov.beta2) rc.train.opt.beta2 = *ov.beta2;
    if (ov.opt_eps) rc.train.opt.eps = *ov.opt_eps;
    rc.export_scoremaps |= ov.export_scoremaps;
    rc.export_scene |= ov.export_scene;
    rc.export_checkpoint |= ov.export_checkpoint;
    rc.finalize();
    return rc;
}

fs::path resolve_out_root(const std::optional<std::string> &flag) {
    if (flag) return *flag;
    if (const char *env = std::getenv("SINKSEG_OUT")) return env;
    return "runs";
}

json config_json(const RunConfig &rc) {
    json j;
    j["mode"] = rc.mode;
    j["seeds"] = rc.seeds;
    j["scene"] = {{"K", rc.scene.K},           {"N", rc.scene.N},
                  {"D", rc.scene.D},           {"H", rc.scene.H},
                  {"W", rc.scene.W},           {"H_I", rc.scene.HI},
                  {"W_I", rc.scene.WI},        {"noise", rc.scene.noise},
                  {"prompt_spread", rc.scene.prompt_spread}, {"n_seen", rc.scene.n_seen}};
    j["sinkhorn"] = {{"epsilon", rc.train.dec.sink.epsilon},
                     {"iters", rc.train.dec.sink.max_iters},
                     {"tol", rc.train.dec.sink.tol}};
    j["decoder"] = {{"layers", rc.train.dec.layers},
                    {"d", rc.train.dec.d},
                    {"ffn_mult", rc.train.dec.ffn_mult},
                    {"attention", rc.train.dec.attn == AttnKind::mpsa ? "mpsa" : "softmax"}};
    j["train"] = {{"steps", rc.train.steps},
                  {"lambda", rc.train.lambda},
                  {"pseudo_threshold", rc.train.pseudo_threshold},
                  {"pseudo_every", rc.train.pseudo_every}};
    j["loss"] = {{"ce", rc.train.loss.lambda_ce},
                 {"focal", rc.train.loss.lambda_focal},
                 {"dice", rc.train.loss.lambda_dice},
                 {"gamma", rc.train.loss.gamma}};
    j["optimizer"] = {{"lr", rc.train.opt.lr},
                      {"weight_decay", rc.train.opt.weight_decay},
                      {"beta1", rc.train.opt.beta1},
                      {"beta2", rc.train.opt.beta2},
                      {"eps", rc.train.opt.eps}};
    j["export"] = {{"scoremaps", rc.export_scoremaps},
                   {"scene", rc.export_scene},
                   {"checkpoint", rc.export_checkpoint}};
    j["library_version"] = library_version;
    return j;
}

void write_json(const fs::path &path, const json &j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path.string());
}

// Removes everything this invocation created, newest first, so a failed run
// leaves no partial artifacts behind.
struct Cleanup {
    std::vector<fs::path> created;
    bool armed = true;

    void track(const fs::path &p) { created.push_back(p); }
    ~Cleanup() {
        if (!armed) return;
        for (auto it = created.rbegin(); it != created.rend(); ++it) {
            std::error_code ec;
            fs::remove_all(*it, ec);
        }
    }
};

fs::path make_dir(const fs::path &p, Cleanup &cleanup) {
    if (!fs::exists(p)) {
        fs::create_directories(p);
        cleanup.track(p);
    }
    return p;
}

// Per-prompt score-map PGMs plus the dispersion statistics comparing the
// plan-refined maps with their per-prompt softmax counterparts.
json export_scoremaps(const fs::path &dir, const EmbeddingBundle &bundle,
                      const SinkhornConfig &sink) {
    const ScoreMap sm = score_map(bundle);
    const RefinedScoreMap refined = mps(sm, sink);
    const Mat mp = prompt_maps(sm, refined);
    const Mat sp = softmax_prompt_maps(sm, sink.epsilon);
    for (int k = 0; k < sm.K; ++k)
        for (int n = 0; n < sm.N; ++n) {
            Mat img(sm.H, sm.W);
            Mat simg(sm.H, sm.W);
            for (int i = 0; i < sm.H * sm.W; ++i) {
                img.data[static_cast<std::size_t>(i)] = mp(i, k * sm.N + n);
                simg.data[static_cast<std::size_t>(i)] = sp(i, k * sm.N + n);
            }
            const std::string tag = "_k" + std::to_string(k) + "_n" + std::to_string(n) + ".pgm";
            write_pgm(dir / ("mps" + tag), img);
            write_pgm(dir / ("softmax" + tag), simg);
        }
    json j;
    if (sm.N >= 2) {
        j["mean_prompt_correlation_mps"] = mean_prompt_correlation(mp, sm.K, sm.N);
        j["mean_prompt_correlation_softmax"] = mean_prompt_correlation(sp, sm.K, sm.N);
    }
    j["prompt_map_variance_mps"] = prompt_map_variance(mp, sm.K, sm.N);
    j["prompt_map_variance_softmax"] = prompt_map_variance(sp, sm.K, sm.N);
    return j;
}

int cmd_run(const RunConfig &rc, const fs::path &root, bool train_enabled) {
    Cleanup cleanup;
    make_dir(root, cleanup);
    std::vector<std::vector<std::string>> rows;
    for (const std::uint64_t seed : rc.seeds) {
        SceneConfig sc = rc.scene;
        sc.seed = seed;
        auto [scene, bundle] = gen_toy_scene(sc);
        const fs::path seed_dir = root / ("seed_" + std::to_string(seed));
        if (fs::exists(seed_dir)) {
            std::error_code ec;
            fs::remove_all(seed_dir, ec);  // stale outputs never mix with new ones
        }
        make_dir(seed_dir, cleanup);

        json summary;
        summary["seed"] = seed;
        summary["mode"] = rc.mode;

        if (train_enabled) {
            // Parameter draw decoupled from the scene stream.
            Rng prng(seed ^ 0x9e3779b97f4a7c15ULL);
            PipelineParams params = pipeline_init(rc.train.dec, rc.scene.D, prng);
            TrainResult result;
            if (rc.mode == "transductive")
                result = train_transductive(scene, bundle, rc.train, std::move(params));
            else if (rc.mode == "fully-supervised")
                result = train_inductive(with_all_seen(scene), bundle, rc.train,
                                         std::move(params));
            else
                result = train_inductive(scene, bundle, rc.train, std::move(params));

            std::vector<std::vector<std::string>> trace;
            trace.reserve(result.loss_trace.size());
            for (std::size_t s = 0; s < result.loss_trace.size(); ++s)
                trace.push_back({std::to_string(s), fmt_double(result.loss_trace[s])});
            write_csv(seed_dir / "trace.csv", {"step", "loss"}, trace);

            // Metrics always group by the scene's original seen/unseen split,
            // also under full supervision, so modes stay comparable.
            const Metrics metrics =
                evaluate(scene, bundle, rc.train.dec, result.params, rc.train.lambda);
            summary["metrics"] = {{"miou_seen", metrics.miou_seen},
                                  {"miou_unseen", metrics.miou_unseen},
                                  {"hiou", metrics.hiou}};
            summary["final_loss"] =
                result.loss_trace.empty() ? 0.0 : result.loss_trace.back();
            summary["diverged"] = result.diverged;
            summary["label_violations"] = result.label_violations;
            if (rc.export_checkpoint) write_checkpoint(seed_dir / "checkpoint.bin", result.params);
            rows.push_back({std::to_string(seed), fmt_double(metrics.miou_seen),
                            fmt_double(metrics.miou_unseen), fmt_double(metrics.hiou),
                            fmt_double(result.loss_trace.empty() ? 0.0
                                                                 : result.loss_trace.back()),
                            result.diverged ? "1" : "0"});
        }
        if (rc.export_scene) write_scene(seed_dir / "scene.bin", scene, bundle);
        if (rc.export_scoremaps) {
            const fs::path maps_dir = make_dir(seed_dir / "scoremaps", cleanup);
            summary["dispersion"] = export_scoremaps(maps_dir, bundle, rc.train.dec.sink);
        }
        write_json(seed_dir / "summary.json", summary);
    }
    if (train_enabled)
        write_csv(root / "metrics.csv",
                  {"seed", "miou_seen", "miou_unseen", "hiou", "final_loss", "diverged"}, rows);
    write_json(root / "manifest.json", config_json(rc));
    cleanup.armed = false;
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"entropic-transport multi-prompt segmentation workbench"};
    app.require_subcommand(1);

    std::optional<std::string> run_config, run_out;
    Overrides run_ov;
    CLI::App *run = app.add_subcommand("run", "train on planted scenes and write metrics");
    add_config_flags(*run, run_config, run_ov);
    run->add_option("--out", run_out, "output root (default $SINKSEG_OUT or ./runs)");

    std::optional<std::string> verify_config;
    Overrides verify_ov;
    CheckOptions check_opt;
    CLI::App *verify = app.add_subcommand("verify", "run the invariant suite");
    add_config_flags(*verify, verify_config, verify_ov);
    verify->add_option("--grad-tol", check_opt.grad_tol, "FD tolerance for operator gradients");
    verify->add_option("--loss-grad-tol", check_opt.loss_grad_tol,
                       "FD tolerance for loss gradients");

    std::optional<std::string> export_config, export_out;
    Overrides export_ov;
    CLI::App *exp = app.add_subcommand("export", "write scenes and score maps without training");
    add_config_flags(*exp, export_config, export_ov);
    exp->add_option("--out", export_out, "output root (default $SINKSEG_OUT or ./runs)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 2;
    }

    try {
        if (run->parsed()) {
            const RunConfig rc = build_config(run_config, run_ov);
            return cmd_run(rc, resolve_out_root(run_out), true);
        }
        if (exp->parsed()) {
            RunConfig rc = build_config(export_config, export_ov);
            // Exports imply the score maps unless the user narrowed them.
            if (!rc.export_scene && !rc.export_scoremaps && !rc.export_checkpoint) {
                rc.export_scene = true;
                rc.export_scoremaps = true;
            }
            return cmd_run(rc, resolve_out_root(export_out), false);
        }
        if (verify->parsed()) {
            (void)build_config(verify_config, verify_ov);  // surface config errors as exit 2
            check_opt.validate();
            const auto results = run_checks(check_opt);
            return print_checks(results, std::cout) == 0 ? 0 : 1;
        }
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
