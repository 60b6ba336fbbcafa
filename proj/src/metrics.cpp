#include "avseg/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "avseg/errors.hpp"
#include "avseg/ops.hpp"

namespace avseg {

Tensor binarize(const Tensor& probs, double threshold) {
    auto d = probs.data();
    std::vector<double> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] > threshold ? 1.0 : 0.0;
    return Tensor(probs.shape(), std::move(out));
}

namespace {

struct FrameCounts {
    double tp = 0, fp = 0, fn = 0;
};

std::vector<FrameCounts> count_frames(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw DimensionError("metrics: prediction " + shape_str(pred.shape()) + " and ground truth " +
                             shape_str(gt.shape()) + " differ");
    }
    const std::size_t T = pred.shape()[0];
    const std::size_t per = pred.numel() / T;
    auto p = pred.data();
    auto g = gt.data();
    std::vector<FrameCounts> out(T);
    for (std::size_t t = 0; t < T; ++t) {
        auto& c = out[t];
        for (std::size_t i = t * per; i < (t + 1) * per; ++i) {
            if ((p[i] != 0.0 && p[i] != 1.0) || (g[i] != 0.0 && g[i] != 1.0)) {
                throw DataError("metrics: masks must be binary");
            }
            const bool a = p[i] == 1.0, b = g[i] == 1.0;
            c.tp += a && b;
            c.fp += a && !b;
            c.fn += !a && b;
        }
    }
    return out;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> frame_iou(const Tensor& pred, const Tensor& gt) {
    std::vector<double> out;
    for (const auto& c : count_frames(pred, gt)) {
        const double uni = c.tp + c.fp + c.fn;
        out.push_back(uni == 0 ? 1.0 : c.tp / uni);
    }
    return out;
}

double miou(const Tensor& pred, const Tensor& gt) { return mean_of(frame_iou(pred, gt)); }

std::vector<double> frame_fscore(const Tensor& pred, const Tensor& gt, double beta_sq) {
    if (!(beta_sq > 0)) throw ParameterError("fscore: beta_sq must be positive");
    std::vector<double> out;
    for (const auto& c : count_frames(pred, gt)) {
        if (c.tp + c.fp + c.fn == 0) {
            out.push_back(1.0);
            continue;
        }
        const double precision = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 0.0;
        const double recall = c.tp + c.fn > 0 ? c.tp / (c.tp + c.fn) : 0.0;
        const double denom = beta_sq * precision + recall;
        out.push_back(denom > 0 ? (1 + beta_sq) * precision * recall / denom : 0.0);
    }
    return out;
}

double fscore(const Tensor& pred, const Tensor& gt, double beta_sq) { return mean_of(frame_fscore(pred, gt, beta_sq)); }

ClassIou::ClassIou(std::size_t num_classes) : inter_(num_classes, 0.0), uni_(num_classes, 0.0) {}

void ClassIou::add(const Tensor& pred_labels, const Tensor& gt_labels) {
    if (pred_labels.shape() != gt_labels.shape()) {
        throw DimensionError("class iou: label maps " + shape_str(pred_labels.shape()) + " and " +
                             shape_str(gt_labels.shape()) + " differ");
    }
    auto p = pred_labels.data();
    auto g = gt_labels.data();
    const std::size_t C = inter_.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto a = static_cast<std::size_t>(p[i]);
        const auto b = static_cast<std::size_t>(g[i]);
        if (a > C || b > C) throw DataError("class iou: label out of range");
        if (a == b) {
            if (a > 0) {
                inter_[a - 1] += 1;
                uni_[a - 1] += 1;
            }
            continue;
        }
        if (a > 0) uni_[a - 1] += 1;
        if (b > 0) uni_[b - 1] += 1;
    }
}

std::map<std::size_t, double> ClassIou::per_class() const {
    std::map<std::size_t, double> out;
    for (std::size_t c = 0; c < inter_.size(); ++c) {
        if (uni_[c] > 0) out[c] = inter_[c] / uni_[c];
    }
    return out;
}

double ClassIou::mean() const {
    const auto pc = per_class();
    if (pc.empty()) return 1.0;
    double s = 0;
    for (const auto& [c, v] : pc) s += v;
    return s / static_cast<double>(pc.size());
}

Tensor predicted_labels(const Tensor& logits, double threshold) {
    const auto& s = logits.shape();
    if (s.size() != 4) throw DimensionError("predicted_labels: expected [T,C,H,W], got " + shape_str(s));
    const std::size_t T = s[0], C = s[1], HW = s[2] * s[3];
    // sigmoid is monotone, so compare logits against logit(threshold).
    const double cut = std::log(threshold / (1 - threshold));
    auto d = logits.data();
    std::vector<double> out(T * HW, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < HW; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c) {
                if (d[(t * C + c) * HW + i] > d[(t * C + best) * HW + i]) best = c;
            }
            if (d[(t * C + best) * HW + i] > cut) out[t * HW + i] = static_cast<double>(best + 1);
        }
    }
    return Tensor({T, s[2], s[3]}, std::move(out));
}

Tensor predicted_foreground(const Tensor& logits, double threshold) {
    const auto& s = logits.shape();
    Tensor labels = predicted_labels(logits, threshold);
    auto d = labels.data();
    std::vector<double> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] > 0 ? 1.0 : 0.0;
    return Tensor({s[0], 1, s[2], s[3]}, std::move(out));
}

namespace {

double frobenius_distance(const Tensor& a, const Tensor& b) {
    auto x = a.data();
    auto y = b.data();
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(s);
}

Tensor channel_mean_frames(const Tensor& frames) {
    const auto& s = frames.shape();
    const std::size_t T = s[0], C = s[1], HW = s[2] * s[3];
    auto d = frames.data();
    std::vector<double> out(d.size());
    for (std::size_t c = 0; c < C; ++c) {
        double m = 0;
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t i = 0; i < HW; ++i) m += d[(t * C + c) * HW + i];
        }
        m /= static_cast<double>(T * HW);
        for (std::size_t t = 0; t < T; ++t) {
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((t * C + c) * HW), HW, m);
        }
    }
    return Tensor(s, std::move(out));
}

}  // namespace

ModalityBalance modality_balance_probe(const AvsModel& model, const Tensor& frames, const Tensor& audio) {
    NoGradGuard no_grad;
    const Tensor fused = model.forward(frames, audio).fused;
    const Tensor fused_a0 = model.forward(frames, Tensor::zeros(audio.shape())).fused;
    const Tensor fused_v0 = model.forward(channel_mean_frames(frames), audio).fused;
    ModalityBalance b;
    b.audio_delta = frobenius_distance(fused, fused_a0);
    b.visual_delta = frobenius_distance(fused, fused_v0);
    const double denom = b.audio_delta + b.visual_delta;
    if (denom == 0) {
        b.degenerate = true;
        return b;
    }
    b.audio_share = b.audio_delta / denom;
    b.visual_share = 1.0 - b.audio_share;
    return b;
}

void MetricsReport::finalize() {
    std::vector<double> m, f, a, v;
    for (const auto& c : clips) {
        m.push_back(c.miou);
        f.push_back(c.fscore);
        a.push_back(c.balance.audio_share);
        v.push_back(c.balance.visual_share);
    }
    miou = mean_of(m);
    fscore = mean_of(f);
    audio_share = mean_of(a);
    visual_share = mean_of(v);
}

using nlohmann::json;

std::string to_jsonl(const MetricsReport& report) {
    std::ostringstream os;
    for (const auto& c : report.clips) {
        json j = {{"type", "clip"},
                  {"index", c.index},
                  {"miou", c.miou},
                  {"fscore", c.fscore},
                  {"audio_share", c.balance.audio_share},
                  {"visual_share", c.balance.visual_share},
                  {"audio_delta", c.balance.audio_delta},
                  {"visual_delta", c.balance.visual_delta},
                  {"probe_degenerate", c.balance.degenerate}};
        os << j.dump() << "\n";
    }
    json agg = {{"type", "aggregate"},
                {"clips", report.clips.size()},
                {"miou", report.miou},
                {"fscore", report.fscore},
                {"audio_share", report.audio_share},
                {"visual_share", report.visual_share}};
    if (report.class_miou) {
        json pc = json::object();
        for (const auto& [c, v] : report.class_iou) pc[std::to_string(c)] = v;
        agg["class_iou"] = pc;
        agg["class_miou"] = *report.class_miou;
    }
    os << agg.dump() << "\n";
    return os.str();
}

MetricsReport report_from_jsonl(const std::string& text) {
    MetricsReport r;
    std::istringstream is(text);
    std::string line;
    bool have_aggregate = false;
    try {
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            if (j.at("type") == "clip") {
                ClipMetrics c;
                c.index = j.at("index").get<std::size_t>();
                c.miou = j.at("miou").get<double>();
                c.fscore = j.at("fscore").get<double>();
                c.balance.audio_share = j.at("audio_share").get<double>();
                c.balance.visual_share = j.at("visual_share").get<double>();
                c.balance.audio_delta = j.at("audio_delta").get<double>();
                c.balance.visual_delta = j.at("visual_delta").get<double>();
                c.balance.degenerate = j.at("probe_degenerate").get<bool>();
                r.clips.push_back(c);
            } else if (j.at("type") == "aggregate") {
                have_aggregate = true;
                r.miou = j.at("miou").get<double>();
                r.fscore = j.at("fscore").get<double>();
                r.audio_share = j.at("audio_share").get<double>();
                r.visual_share = j.at("visual_share").get<double>();
                if (j.contains("class_miou")) {
                    r.class_miou = j.at("class_miou").get<double>();
                    for (const auto& [k, v] : j.at("class_iou").items()) r.class_iou[std::stoul(k)] = v.get<double>();
                }
            }
        }
    } catch (const json::exception& e) {
        throw LoadError(std::string("report: ") + e.what());
    }
    if (!have_aggregate) throw LoadError("report: no aggregate record");
    return r;
}

void write_report(const MetricsReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out << to_jsonl(report);
}

}  // namespace avseg
