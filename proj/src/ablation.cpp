#include "avseg/ablation.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "avseg/errors.hpp"
#include "avseg/trainer.hpp"

namespace avseg {

std::vector<std::string> ablation_presets() { return {"agca", "bridge_direction", "loss_variants", "depth"}; }

namespace {

void set_bridge(RunConfig& c, BridgeMode m) { c.model.bridge = m; }

void set_loss(RunConfig& c, SegLoss seg, SyncLoss sync) {
    c.loss.seg = seg;
    c.loss.sync = sync;
}

}  // namespace

std::vector<AblationVariant> preset_variants(const std::string& preset) {
    if (preset == "agca") {
        // Key modules: static exchange without synchrony, bridges, bridges + synchrony.
        return {
            {"Baseline", [](RunConfig& c) { set_bridge(c, BridgeMode::none); set_loss(c, SegLoss::dice_focal, SyncLoss::none); }},
            {"BAVD", [](RunConfig& c) { set_bridge(c, BridgeMode::bidirectional); set_loss(c, SegLoss::dice_focal, SyncLoss::none); }},
            {"Ours", [](RunConfig& c) { set_bridge(c, BridgeMode::bidirectional); set_loss(c, SegLoss::dice_focal, SyncLoss::kl); }},
        };
    }
    if (preset == "bridge_direction") {
        return {
            {"only Audio → Vis", [](RunConfig& c) { set_bridge(c, BridgeMode::audio_to_vis); }},
            {"only Vis → Audio", [](RunConfig& c) { set_bridge(c, BridgeMode::vis_to_audio); }},
            {"w/o AGCA", [](RunConfig& c) { set_bridge(c, BridgeMode::no_agca); }},
            {"w/ BAVD", [](RunConfig& c) { set_bridge(c, BridgeMode::bidirectional); }},
        };
    }
    if (preset == "loss_variants") {
        return {
            {"Dice Loss", [](RunConfig& c) { set_loss(c, SegLoss::dice, SyncLoss::none); }},
            {"L_Seg", [](RunConfig& c) { set_loss(c, SegLoss::dice_focal, SyncLoss::none); }},
            {"L_Seg + L2", [](RunConfig& c) { set_loss(c, SegLoss::dice_focal, SyncLoss::l2); }},
            {"L_Seg + Frame-wise L2", [](RunConfig& c) { set_loss(c, SegLoss::dice_focal, SyncLoss::framewise_l2); }},
            {"Ours", [](RunConfig& c) { set_loss(c, SegLoss::dice_focal, SyncLoss::kl); }},
        };
    }
    if (preset == "depth") {
        std::vector<AblationVariant> out;
        for (std::size_t n : {2, 4, 6}) {
            out.push_back({std::to_string(n), [n](RunConfig& c) { c.model.num_layers = n; }});
        }
        return out;
    }
    throw ConfigError("unknown ablation preset '" + preset + "'");
}

Spread spread_of(std::vector<double> v) {
    if (v.empty()) return {};
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    return {v.front(), median, v.back()};
}

AblationTable run_ablation(const std::string& preset, const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                           const std::function<void(const std::string&)>& progress) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    const auto variants = preset_variants(preset);
    AblationTable table;
    table.preset = preset;
    table.split = base.data.eval_clips > 0 ? "held_out" : "train";

    // The data is shared by every run.
    const auto train = load_or_generate_train(base.data);
    const auto held_out = base.data.eval_clips > 0 ? generate_split(base.data.eval_split()) : std::vector<Clip>{};

    for (const auto& v : variants) {
        AblationRow row;
        row.setting = v.setting;
        for (auto seed : seeds) {
            RunConfig cfg = base;
            v.apply(cfg);
            cfg.seed = seed;
            cfg.model.init_seed = seed;
            cfg.out_dir.clear();
            Trainer t(cfg, train, held_out);
            t.run();
            const MetricsReport r = held_out.empty() ? t.evaluate_train(true) : *t.evaluate_held_out(true);
            row.seeds.push_back(seed);
            row.miou.push_back(r.miou);
            row.fscore.push_back(r.fscore);
            row.audio_share.push_back(r.audio_share);
            row.steps.push_back(t.steps_done());
            if (progress) {
                std::ostringstream os;
                os << preset << " | " << v.setting << " | seed " << seed << " | steps " << t.steps_done()
                   << " | mIoU " << std::fixed << std::setprecision(4) << r.miou << " | F " << r.fscore;
                progress(os.str());
            }
        }
        table.rows.push_back(std::move(row));
    }

    if (preset == "bridge_direction") {
        DirectionCheck d;
        d.holds = true;
        for (const auto& row : table.rows) {
            const double med = spread_of(row.miou).median;
            if (row.setting == "w/ BAVD") {
                d.bidirectional_median = med;
            } else if (row.setting != "w/o AGCA") {
                d.unidirectional_medians.emplace_back(row.setting, med);
            }
        }
        for (const auto& [name, med] : d.unidirectional_medians) d.holds = d.holds && d.bidirectional_median >= med;
        table.direction = d;
    }
    return table;
}

nlohmann::json to_json(const AblationTable& table) {
    using nlohmann::json;
    json rows = json::array();
    for (const auto& r : table.rows) {
        const Spread m = spread_of(r.miou), f = spread_of(r.fscore), a = spread_of(r.audio_share);
        rows.push_back({{"setting", r.setting},
                        {"seeds", r.seeds},
                        {"steps", r.steps},
                        {"miou", r.miou},
                        {"fscore", r.fscore},
                        {"audio_share", r.audio_share},
                        {"miou_spread", {{"min", m.min}, {"median", m.median}, {"max", m.max}}},
                        {"fscore_spread", {{"min", f.min}, {"median", f.median}, {"max", f.max}}},
                        {"audio_share_spread", {{"min", a.min}, {"median", a.median}, {"max", a.max}}}});
    }
    json j = {{"preset", table.preset}, {"split", table.split}, {"rows", rows}};
    if (table.direction) {
        json others = json::object();
        for (const auto& [name, med] : table.direction->unidirectional_medians) others[name] = med;
        j["direction"] = {{"bidirectional_median_miou", table.direction->bidirectional_median},
                          {"unidirectional_median_miou", others},
                          {"bidirectional_at_least_unidirectional", table.direction->holds}};
    }
    return j;
}

std::string to_markdown(const AblationTable& table) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "### " << table.preset << " (" << table.split << " split, " << (table.rows.empty() ? 0 : table.rows[0].seeds.size())
       << " seeds, min / median / max)\n\n";
    os << "| Settings | F-score | mIoU | audio share (median) |\n|---|---|---|---|\n";
    for (const auto& r : table.rows) {
        const Spread m = spread_of(r.miou), f = spread_of(r.fscore), a = spread_of(r.audio_share);
        os << "| " << r.setting << " | " << f.min << " / " << f.median << " / " << f.max << " | " << m.min << " / "
           << m.median << " / " << m.max << " | " << a.median << " |\n";
    }
    if (table.direction) {
        os << "\nBidirectional median mIoU " << table.direction->bidirectional_median;
        for (const auto& [name, med] : table.direction->unidirectional_medians) os << "; " << name << " " << med;
        os << ". Bidirectional >= each unidirectional variant: " << (table.direction->holds ? "yes" : "no") << "\n";
    }
    return os.str();
}

void write_ablation(const AblationTable& table, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / (table.preset + ".json")) << to_json(table).dump(2) << "\n";
    std::ofstream(dir / (table.preset + ".md")) << to_markdown(table);
}

}  // namespace avseg
