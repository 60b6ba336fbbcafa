// Command-line front end: generate, train, eval, ablate, gradcheck, probe.

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "avseg/ablation.hpp"
#include "avseg/errors.hpp"
#include "avseg/gradcheck.hpp"
#include "avseg/trainer.hpp"

using namespace avseg;

namespace {

RunConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
    if (out.empty()) throw ConfigError("no seeds given");
    return out;
}

void print_report(const MetricsReport& r) {
    std::printf("clips %zu  mIoU %.4f  F-score %.4f  audio share %.4f  visual share %.4f\n", r.clips.size(), r.miou,
                r.fscore, r.audio_share, r.visual_share);
    if (r.class_miou) {
        std::printf("class mIoU %.4f:", *r.class_miou);
        for (const auto& [c, v] : r.class_iou) std::printf(" c%zu=%.4f", c, v);
        std::printf("\n");
    }
}

void check_clip_geometry(const std::vector<Clip>& clips, const ModelConfig& mc) {
    for (const auto& c : clips) {
        const auto& s = c.frames.shape();
        if (s[2] != mc.height || s[3] != mc.width || c.audio.shape()[1] != mc.audio_dim) {
            throw LoadError("split geometry " + shape_str(s) + " / audio " + shape_str(c.audio.shape()) +
                            " does not match the checkpoint configuration");
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Audio-visual segmentation toolkit with a bidirectional decoder"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "Write a synthetic split to disk");
    std::string gen_task = "s4", gen_out;
    SplitConfig split;
    gen->add_option("--task", gen_task, "s4, ms3 or semantic");
    gen->add_option("--n", split.n_clips, "number of clips");
    gen->add_option("--seed", split.seed, "split seed");
    gen->add_option("--frames", split.frames, "frames per clip (0: task default)");
    gen->add_option("--num-classes", split.num_classes, "number of object classes");
    gen->add_option("--audio-dim", split.audio_dim, "audio descriptor length");
    gen->add_option("--audio-noise", split.audio_noise, "audio noise standard deviation");
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "Train a model");
    std::string train_cfg, train_resume;
    std::vector<std::string> train_set;
    train->add_option("--config", train_cfg, "key = value config file");
    train->add_option("--set", train_set, "override, key=value (repeatable)");
    train->add_option("--resume", train_resume, "continue from a checkpoint");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string eval_ckpt, eval_split, eval_out;
    bool eval_held_out = false;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--split", eval_split, "split directory (default: the training split of the run)");
    eval->add_flag("--held-out", eval_held_out, "evaluate the run's held-out split");
    eval->add_option("--out", eval_out, "report file (JSON lines)");

    auto* ablate = app.add_subcommand("ablate", "Run an ablation preset over several seeds");
    std::string ab_preset = "all", ab_seeds = "0,1,2", ab_cfg, ab_out = "ablation";
    std::vector<std::string> ab_set;
    ablate->add_option("--preset", ab_preset, "agca, bridge_direction, loss_variants, depth or all");
    ablate->add_option("--seeds", ab_seeds, "comma-separated seeds");
    ablate->add_option("--config", ab_cfg, "base config file");
    ablate->add_option("--set", ab_set, "override, key=value (repeatable)");
    ablate->add_option("--out", ab_out, "output directory");

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
    double gc_tol = 1e-4;
    grad->add_option("--tolerance", gc_tol, "maximum relative error");

    auto* probe = app.add_subcommand("probe", "Audio/visual share of the fused feature");
    std::string probe_ckpt, probe_cfg;
    std::vector<std::string> probe_set;
    std::size_t probe_clip = 0;
    probe->add_option("--checkpoint", probe_ckpt, "checkpoint file (default: untrained model)");
    probe->add_option("--config", probe_cfg, "config file when no checkpoint is given");
    probe->add_option("--set", probe_set, "override, key=value (repeatable)");
    probe->add_option("--clip", probe_clip, "clip index in the training split");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            split.task = parse_task(gen_task);
            const auto clips = generate_split(split);
            save_split(clips, gen_out);
            std::printf("wrote %zu %s clips to %s\n", clips.size(), gen_task.c_str(), gen_out.c_str());
        } else if (*train) {
            Trainer t = train_resume.empty() ? Trainer(build_config(train_cfg, train_set)) : Trainer::resume(train_resume);
            const auto& cfg = t.config();
            std::printf("parameters %zu, steps %zu..%zu\n", t.model().parameter_count(), t.steps_done(), cfg.optim.steps);
            t.run([&](const StepLog& r, const EvalPoint* e) {
                if (r.step % cfg.log_every == 0) {
                    std::printf("step %zu  dice %.5f  focal %.5f  avfs %.5f  total %.5f\n", r.step, r.dice, r.focal,
                                r.avfs, r.total);
                }
                if (e) std::printf("eval step %zu  train mIoU %.4f  F-score %.4f\n", e->step, e->miou, e->fscore);
                std::fflush(stdout);
            });
            print_report(t.evaluate_train(true));
            if (auto r = t.evaluate_held_out(true)) print_report(*r);
            t.write_outputs();
            if (!cfg.out_dir.empty()) std::printf("outputs in %s\n", cfg.out_dir.c_str());
        } else if (*eval) {
            const Checkpoint ckpt = load_checkpoint(eval_ckpt);
            const ModelConfig mc = ckpt.config.resolved_model();
            AvsModel model(mc);
            restore_parameters(ckpt, model.parameters());
            std::vector<Clip> clips;
            if (!eval_split.empty()) {
                clips = load_split(eval_split);
            } else if (eval_held_out) {
                if (ckpt.config.data.eval_clips == 0) throw ConfigError("the run has no held-out split");
                clips = generate_split(ckpt.config.data.eval_split());
            } else {
                clips = load_or_generate_train(ckpt.config.data);
            }
            check_clip_geometry(clips, mc);
            const MetricsReport r = evaluate(model, clips, ckpt.config.data.task, true);
            print_report(r);
            if (!eval_out.empty()) write_report(r, eval_out);
        } else if (*ablate) {
            const RunConfig base = build_config(ab_cfg, ab_set);
            const auto seeds = parse_seeds(ab_seeds);
            const auto presets = ab_preset == "all" ? ablation_presets() : std::vector<std::string>{ab_preset};
            for (const auto& p : presets) {
                const AblationTable table =
                    run_ablation(p, base, seeds, [](const std::string& line) { std::printf("%s\n", line.c_str()); });
                write_ablation(table, ab_out);
                std::printf("\n%s\n", to_markdown(table).c_str());
            }
        } else if (*grad) {
            GradCheckOptions opts;
            opts.tolerance = gc_tol;
            bool ok = true;
            double total = 0;
            for (const auto& r : run_gradcheck_suite(opts, [](const GradCheckResult& r) {
                     std::printf("%-32s %-4s max error %.3e  (%.2f s)\n", r.name.c_str(), r.passed ? "ok" : "FAIL",
                                 r.max_error, r.seconds);
                     std::fflush(stdout);
                 })) {
                ok = ok && r.passed;
                total += r.seconds;
            }
            std::printf("%s in %.1f s\n", ok ? "all gradients match" : "gradient mismatch", total);
            return ok ? 0 : 1;
        } else if (*probe) {
            RunConfig cfg;
            std::unique_ptr<AvsModel> model;
            if (!probe_ckpt.empty()) {
                const Checkpoint ckpt = load_checkpoint(probe_ckpt);
                cfg = ckpt.config;
                model = std::make_unique<AvsModel>(cfg.resolved_model());
                restore_parameters(ckpt, model->parameters());
            } else {
                cfg = build_config(probe_cfg, probe_set);
                model = std::make_unique<AvsModel>(cfg.resolved_model());
            }
            const auto clips = load_or_generate_train(cfg.data);
            if (probe_clip >= clips.size()) throw ConfigError("clip index out of range");
            const ModalityBalance b = modality_balance_probe(*model, clips[probe_clip].frames, clips[probe_clip].audio);
            std::printf("audio share %.6f  visual share %.6f  (audio delta %.6g, visual delta %.6g%s)\n", b.audio_share,
                        b.visual_share, b.audio_delta, b.visual_delta, b.degenerate ? ", degenerate" : "");
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
