#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "avseg/ablation.hpp"
#include "avseg/errors.hpp"
#include "avseg/trainer.hpp"

using namespace avseg;

namespace {

RunConfig tiny_run() {
    RunConfig c;
    c.data.n_clips = 3;
    c.data.frames = 2;
    c.data.audio_dim = 8;
    c.data.seed = 4;
    c.model.num_layers = 1;
    c.model.model_dim = 8;
    c.model.num_queries = 4;
    c.model.num_heads = 2;
    c.model.num_points = 2;
    c.model.init_seed = 2;
    c.optim.steps = 4;
    c.optim.batch = 2;
    c.optim.lr = 3e-3;
    c.eval_every = 2;
    c.seed = 9;
    return c;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("avseg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::vector<double> flat_params(AvsModel& m) {
    std::vector<double> out;
    for (const auto& [name, t] : m.parameters()) {
        const auto d = t.data();
        out.insert(out.end(), d.begin(), d.end());
    }
    return out;
}

}  // namespace

TEST_CASE("run config text round trip") {
    RunConfig c = tiny_run();
    c.data.task = Task::ms3;
    c.data.audio_noise = 0.1;
    c.model.bridge = BridgeMode::vis_to_audio;
    c.model.fusion = FusionMode::elementwise;
    c.loss.sync = SyncLoss::framewise_l2;
    c.loss.focal_alpha = 1.0 / 3.0;
    c.optim.lr = 2e-5;
    c.target_miou = 0.9;
    c.out_dir = "runs/x";
    const RunConfig back = RunConfig::from_text(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.items() == c.items());
    CHECK(back.loss.focal_alpha == c.loss.focal_alpha);
    CHECK(back.model.bridge == BridgeMode::vis_to_audio);

    const auto dir = temp_dir("config");
    c.save(dir / "c.txt");
    CHECK(RunConfig::load(dir / "c.txt").to_text() == c.to_text());

    const RunConfig commented = RunConfig::from_text("# comment\n\noptim.lr = 0.5  \n model.num_layers=3\n");
    CHECK(commented.optim.lr == 0.5);
    CHECK(commented.model.num_layers == 3);

    RunConfig s;
    CHECK_THROWS_AS(s.set("optim.learning_rate", "1"), ConfigError);
    CHECK_THROWS_AS(s.set("optim.steps", "-3"), ConfigError);
    CHECK_THROWS_AS(s.set("optim.lr", "fast"), ConfigError);
    CHECK_THROWS_AS(s.set("model.bridge", "sideways"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("no equals sign\n"), ConfigError);
    s.optim.lr = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = RunConfig{};
    s.model.num_heads = 5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("resolved model follows the data") {
    RunConfig c;
    c.data.task = Task::semantic;
    c.data.num_classes = 5;
    c.data.audio_dim = 12;
    const ModelConfig m = c.resolved_model();
    CHECK(m.frames == 10);
    CHECK(m.num_classes == 5);
    CHECK(m.audio_dim == 12);
    c.data.task = Task::s4;
    CHECK(c.resolved_model().num_classes == 1);
    CHECK(c.resolved_model().frames == 5);
}

TEST_CASE("AdamW matches a hand-computed update") {
    Tensor x({3}, {0.5, -1.0, 2.0}, true);
    Tensor idle({2}, {1.5, -0.25}, true);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    AdamW opt({{"x", x}, {"idle", idle}}, cfg);

    std::vector<double> xs = {0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
    std::vector<double> is = {1.5, -0.25};
    for (int step = 1; step <= 3; ++step) {
        opt.zero_grad();
        sum(mul(x, x)).backward();  // g = 2x
        opt.step();
        for (std::size_t i = 0; i < 3; ++i) {
            const double g = 2 * xs[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
            xs[i] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * xs[i]);
        }
        // A parameter without gradient only decays.
        for (auto& w : is) w -= 0.1 * 0.01 * w;
        for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(x.data()[i] - xs[i]) <= 1e-15);
        for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(idle.data()[i] - is[i]) <= 1e-15);
    }
    CHECK(opt.steps_taken() == 3);
    // The first step moves by lr * g / (|g| + eps) whatever the gradient scale.
    Tensor y({1}, {1000.0}, true);
    AdamWConfig plain;
    plain.lr = 0.01;
    AdamW o2({{"y", y}}, plain);
    scale(sum(y), 1e-6).backward();
    o2.step();
    CHECK(std::abs(y.data()[0] - (1000.0 - 0.01 * 1e-6 / (1e-6 + 1e-8))) <= 1e-12);
    AdamWConfig bad;
    bad.lr = 0;
    CHECK_THROWS_AS(AdamW({{"y", y}}, bad), ConfigError);
}

TEST_CASE("batch order is a per-epoch permutation") {
    for (std::size_t n : {1, 3, 7}) {
        for (std::size_t batch : {1, 2, 3}) {
            std::vector<std::size_t> flat;
            for (std::size_t step = 0; step < 4 * n; ++step) {
                const auto idx = batch_indices(11, n, batch, step);
                CHECK(idx.size() == batch);
                CHECK(idx == batch_indices(11, n, batch, step));
                flat.insert(flat.end(), idx.begin(), idx.end());
            }
            for (std::size_t e = 0; e + n <= flat.size(); e += n) {
                std::set<std::size_t> seen(flat.begin() + e, flat.begin() + e + n);
                CHECK(seen.size() == n);
                CHECK(*seen.rbegin() == n - 1);
            }
        }
    }
    std::vector<std::size_t> a, b;
    for (std::size_t s = 0; s < 4; ++s) {
        for (auto i : batch_indices(1, 16, 4, s)) a.push_back(i);
        for (auto i : batch_indices(2, 16, 4, s)) b.push_back(i);
    }
    CHECK(a != b);
}

TEST_CASE("semantic targets are one-hot class planes") {
    SplitConfig sc;
    sc.task = Task::semantic;
    sc.n_clips = 1;
    sc.num_classes = 4;
    const Clip c = generate_split(sc)[0];
    const Tensor y = clip_target(c, Task::semantic, 4);
    REQUIRE(y.shape() == Shape{10, 4, 64, 64});
    for (std::size_t t = 0; t < 10; t += 3) {
        for (std::size_t i = 0; i < 64; i += 5) {
            for (std::size_t j = 0; j < 64; j += 3) {
                const auto lbl = static_cast<std::size_t>(c.class_masks.at({t, i, j}));
                double total = 0;
                for (std::size_t k = 0; k < 4; ++k) {
                    total += y.at({t, k, i, j});
                    CHECK(y.at({t, k, i, j}) == (lbl == k + 1 ? 1.0 : 0.0));
                }
                CHECK(total == (lbl > 0 ? 1.0 : 0.0));
                CHECK(c.masks.at({t, 0, i, j}) == total);
            }
        }
    }
    CHECK(clip_target(c, Task::s4, 1).to_vector() == c.masks.to_vector());
}

TEST_CASE("training is deterministic and evaluation reproduces the logged metric") {
    Trainer a(tiny_run()), b(tiny_run());
    a.run();
    b.run();
    REQUIRE(a.log().size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(a.log()[i].total == b.log()[i].total);
        CHECK(a.log()[i].total == a.log()[i].dice + a.log()[i].focal + a.log()[i].avfs);
    }
    CHECK(flat_params(a.model()) == flat_params(b.model()));
    REQUIRE(a.evals().size() == 2);
    CHECK(std::abs(a.evaluate_train(false).miou - a.evals().back().miou) <= 1e-6);
    // Training changes the loss.
    CHECK(a.log().front().total != a.log().back().total);
}

TEST_CASE("checkpoint round trip preserves the trajectory") {
    const auto dir = temp_dir("ckpt");
    RunConfig cfg = tiny_run();
    cfg.optim.steps = 6;
    cfg.eval_every = 0;

    Trainer straight(cfg);
    straight.run();

    Trainer first(cfg);
    for (int i = 0; i < 3; ++i) first.step();
    first.save(dir / "mid.bin");
    Trainer resumed = Trainer::resume(dir / "mid.bin");
    CHECK(resumed.steps_done() == 3);
    CHECK(resumed.optimizer().steps_taken() == 3);
    resumed.run();
    REQUIRE(resumed.log().size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(resumed.log()[i].step == straight.log()[3 + i].step);
        CHECK(resumed.log()[i].total == straight.log()[3 + i].total);
    }
    CHECK(flat_params(resumed.model()) == flat_params(straight.model()));

    SUBCASE("corrupt files are rejected") {
        std::ifstream in(dir / "mid.bin", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        auto write = [&](const std::string& name, const std::string& content) {
            std::ofstream(dir / name, std::ios::binary) << content;
            return dir / name;
        };
        CHECK_THROWS_AS(load_checkpoint(write("trunc.bin", bytes.substr(0, bytes.size() / 2))), LoadError);
        CHECK_THROWS_AS(load_checkpoint(write("tail.bin", bytes + "x")), LoadError);
        std::string magic = bytes;
        magic[0] = 'X';
        CHECK_THROWS_AS(load_checkpoint(write("magic.bin", magic)), LoadError);
        std::string version = bytes;
        version[8] = 7;
        CHECK_THROWS_AS(load_checkpoint(write("version.bin", version)), LoadError);
        CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), LoadError);
    }
    SUBCASE("parameter mismatch is rejected") {
        const Checkpoint ck = load_checkpoint(dir / "mid.bin");
        RunConfig other = cfg;
        other.model.num_layers = 2;
        AvsModel bigger(other.resolved_model());
        CHECK_THROWS_AS(restore_parameters(ck, bigger.parameters()), LoadError);
        other = cfg;
        other.model.model_dim = 12;
        other.model.num_heads = 2;
        AvsModel wider(other.resolved_model());
        CHECK_THROWS_AS(restore_parameters(ck, wider.parameters()), LoadError);
    }
}

TEST_CASE("non-finite loss aborts with the offending term") {
    Trainer t(tiny_run());
    auto params = t.model().parameters();
    params.front().second.data_mut()[0] = std::nan("");
    try {
        t.step();
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("dice") != std::string::npos);
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
    CHECK(t.steps_done() == 0);
}

TEST_CASE("early stop at the target mIoU") {
    RunConfig cfg = tiny_run();
    cfg.eval_every = 1;
    cfg.target_miou = 1e-12;
    cfg.optim.steps = 50;
    Trainer t(cfg);
    t.run();
    // Any nonzero overlap ends the run at the first evaluation that reaches it.
    if (t.reached_target()) {
        CHECK(t.evals().back().miou >= cfg.target_miou);
        CHECK(t.steps_done() == t.evals().back().step);
    } else {
        CHECK(t.steps_done() == 50);
    }
}

TEST_CASE("run outputs") {
    const auto dir = temp_dir("outputs");
    RunConfig cfg = tiny_run();
    cfg.data.eval_clips = 2;
    cfg.out_dir = (dir / "run").string();
    Trainer t(cfg);
    t.run();
    t.write_outputs();
    for (const char* f : {"config.txt", "train_log.csv", "eval_log.csv", "curves.svg", "checkpoint.bin",
                          "train_report.jsonl", "eval_report.jsonl"}) {
        CHECK_MESSAGE(std::filesystem::exists(dir / "run" / f), f);
    }
    std::ifstream in(dir / "run" / "train_report.jsonl");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const MetricsReport r = report_from_jsonl(text);
    CHECK(r.clips.size() == 3);
    CHECK(RunConfig::load(dir / "run" / "config.txt").to_text() == cfg.to_text());
}

TEST_CASE("ablation presets") {
    CHECK(ablation_presets() == std::vector<std::string>{"agca", "bridge_direction", "loss_variants", "depth"});
    CHECK_THROWS_AS(preset_variants("width"), ConfigError);

    auto labels = [](const std::string& p) {
        std::vector<std::string> out;
        for (const auto& v : preset_variants(p)) out.push_back(v.setting);
        return out;
    };
    CHECK(labels("agca") == std::vector<std::string>{"Baseline", "BAVD", "Ours"});
    CHECK(labels("bridge_direction") ==
          std::vector<std::string>{"only Audio → Vis", "only Vis → Audio", "w/o AGCA", "w/ BAVD"});
    CHECK(labels("loss_variants") ==
          std::vector<std::string>{"Dice Loss", "L_Seg", "L_Seg + L2", "L_Seg + Frame-wise L2", "Ours"});
    CHECK(labels("depth") == std::vector<std::string>{"2", "4", "6"});

    std::vector<BridgeMode> bridges;
    for (const auto& v : preset_variants("bridge_direction")) {
        RunConfig c;
        v.apply(c);
        bridges.push_back(c.model.bridge);
    }
    CHECK(bridges == std::vector<BridgeMode>{BridgeMode::audio_to_vis, BridgeMode::vis_to_audio, BridgeMode::no_agca,
                                             BridgeMode::bidirectional});
    std::vector<SyncLoss> syncs;
    for (const auto& v : preset_variants("loss_variants")) {
        RunConfig c;
        v.apply(c);
        syncs.push_back(c.loss.sync);
        CHECK(c.loss.seg == (v.setting == "Dice Loss" ? SegLoss::dice : SegLoss::dice_focal));
    }
    CHECK(syncs == std::vector<SyncLoss>{SyncLoss::none, SyncLoss::none, SyncLoss::l2, SyncLoss::framewise_l2,
                                         SyncLoss::kl});

    const Spread s = spread_of({3.0, 1.0, 2.0, 10.0});
    CHECK(s.min == 1.0);
    CHECK(s.median == 2.5);
    CHECK(s.max == 10.0);
}

TEST_CASE("ablation run structure") {
    RunConfig base = tiny_run();
    base.optim.steps = 1;
    base.eval_every = 0;
    base.data.eval_clips = 1;
    std::vector<std::string> lines;
    const AblationTable t = run_ablation("bridge_direction", base, {0, 1}, [&](const std::string& l) { lines.push_back(l); });
    CHECK(t.split == "held_out");
    REQUIRE(t.rows.size() == 4);
    CHECK(lines.size() == 8);
    for (const auto& r : t.rows) {
        CHECK(r.seeds == std::vector<std::uint64_t>{0, 1});
        CHECK(r.miou.size() == 2);
        CHECK(r.steps == std::vector<std::size_t>{1, 1});
    }
    REQUIRE(t.direction.has_value());
    CHECK(t.direction->unidirectional_medians.size() == 2);
    const auto j = to_json(t);
    CHECK(j["rows"].size() == 4);
    CHECK(j["direction"].contains("bidirectional_at_least_unidirectional"));
    const std::string md = to_markdown(t);
    CHECK(md.find("| w/ BAVD |") != std::string::npos);
    const auto dir = temp_dir("ablation");
    write_ablation(t, dir);
    CHECK(std::filesystem::exists(dir / "bridge_direction.json"));
    CHECK(std::filesystem::exists(dir / "bridge_direction.md"));
    CHECK_THROWS_AS(run_ablation("depth", base, {}), ConfigError);
}
