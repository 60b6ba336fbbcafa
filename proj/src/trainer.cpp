#include "avseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "avseg/errors.hpp"
#include "avseg/losses.hpp"
#include "avseg/ops.hpp"
#include "avseg/rng.hpp"

namespace avseg {

Tensor clip_target(const Clip& clip, Task task, std::size_t num_classes) {
    if (task != Task::semantic) return clip.masks;
    const auto& s = clip.class_masks.shape();
    const std::size_t T = s[0], HW = s[1] * s[2];
    auto labels = clip.class_masks.data();
    std::vector<double> out(T * num_classes * HW, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < HW; ++i) {
            const auto c = static_cast<std::size_t>(labels[t * HW + i]);
            if (c == 0) continue;
            if (c > num_classes) throw DataError("clip label " + std::to_string(c - 1) + " exceeds the class count");
            out[(t * num_classes + c - 1) * HW + i] = 1.0;
        }
    }
    return Tensor({T, num_classes, s[1], s[2]}, std::move(out));
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t n_clips, std::size_t batch, std::size_t step) {
    std::vector<std::size_t> out;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm(n_clips);
    for (std::size_t k = 0; k < batch; ++k) {
        const std::size_t pos = step * batch + k;
        const std::size_t epoch = pos / n_clips;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            Rng rng(mix_seed(seed, epoch));
            for (std::size_t i = n_clips; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % n_clips]);
    }
    return out;
}

MetricsReport evaluate(const AvsModel& model, const std::vector<Clip>& clips, Task task, bool with_probe) {
    NoGradGuard no_grad;
    MetricsReport report;
    const std::size_t C = model.config().num_classes;
    std::optional<ClassIou> class_iou;
    if (task == Task::semantic) class_iou.emplace(C);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& clip = clips[i];
        const Tensor logits = model.forward(clip.frames, clip.audio).mask.logits;
        const Tensor pred = predicted_foreground(logits);
        ClipMetrics m;
        m.index = i;
        m.miou = miou(pred, clip.masks);
        m.fscore = fscore(pred, clip.masks);
        if (with_probe) m.balance = modality_balance_probe(model, clip.frames, clip.audio);
        if (class_iou) class_iou->add(predicted_labels(logits), clip.class_masks);
        report.clips.push_back(m);
    }
    report.finalize();
    if (class_iou) {
        report.class_iou = class_iou->per_class();
        report.class_miou = class_iou->mean();
    }
    return report;
}

std::vector<Clip> load_or_generate_train(const DataConfig& data) {
    if (!data.root.empty()) return load_split(data.root);
    return generate_split(data.train_split());
}

Trainer::Trainer(const RunConfig& cfg)
    : Trainer(cfg, load_or_generate_train(cfg.data),
              cfg.data.eval_clips > 0 ? generate_split(cfg.data.eval_split()) : std::vector<Clip>{}) {}

Trainer::Trainer(const RunConfig& cfg, std::vector<Clip> train_clips, std::vector<Clip> eval_clips)
    : cfg_(cfg), train_(std::move(train_clips)), eval_(std::move(eval_clips)) {
    cfg_.validate();
    if (train_.empty()) throw ConfigError("trainer: empty training split");
    const ModelConfig mc = cfg_.resolved_model();
    for (const auto& c : train_) {
        const auto& s = c.frames.shape();
        if (s[2] != mc.height || s[3] != mc.width || c.audio.shape()[1] != mc.audio_dim) {
            throw ConfigError("trainer: clip geometry " + shape_str(s) + " does not match the configuration");
        }
        targets_.push_back(clip_target(c, cfg_.data.task, mc.num_classes));
    }
    model_ = std::make_unique<AvsModel>(mc);
    AdamWConfig oc;
    oc.lr = cfg_.optim.lr;
    oc.weight_decay = cfg_.optim.weight_decay;
    oc.beta1 = cfg_.optim.beta1;
    oc.beta2 = cfg_.optim.beta2;
    oc.eps = cfg_.optim.eps;
    opt_ = std::make_unique<AdamW>(model_->parameters(), oc);
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    Trainer t(ckpt.config);
    restore_optimizer(ckpt, *t.opt_);
    t.step_ = ckpt.step;
    return t;
}

StepLog Trainer::step() {
    const auto idx = batch_indices(cfg_.seed, train_.size(), cfg_.optim.batch, step_);
    std::vector<Tensor> frames, audio, target;
    for (auto i : idx) {
        frames.push_back(train_[i].frames);
        audio.push_back(train_[i].audio);
        target.push_back(targets_[i]);
    }
    const Tensor f = frames.size() == 1 ? frames[0] : concat(frames, 0);
    const Tensor a = audio.size() == 1 ? audio[0] : concat(audio, 0);
    const Tensor y = target.size() == 1 ? target[0] : concat(target, 0);

    opt_->zero_grad();
    const ModelOutput out = model_->forward(f, a);
    const LossBreakdown lb = total_loss(out.mask.logits, y, out.f_a0, out.f_agv, cfg_.loss);
    StepLog rec{step_ + 1, lb.dice, lb.focal, lb.avfs, lb.total};
    for (auto [name, v] : {std::pair{"dice", lb.dice}, {"focal", lb.focal}, {"avfs", lb.avfs}}) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite ") + name + " loss at step " + std::to_string(rec.step));
        }
    }
    lb.total_tensor.backward();
    opt_->step();
    ++step_;
    log_.push_back(rec);
    return rec;
}

void Trainer::run(const Observer& observer) {
    reached_target_ = false;
    while (step_ < cfg_.optim.steps) {
        const StepLog rec = step();
        const bool last = step_ == cfg_.optim.steps;
        if (cfg_.eval_every > 0 && (step_ % cfg_.eval_every == 0 || last)) {
            const MetricsReport r = evaluate_train(false);
            evals_.push_back({step_, r.miou, r.fscore});
            if (observer) observer(rec, &evals_.back());
            if (cfg_.target_miou > 0 && r.miou >= cfg_.target_miou) {
                reached_target_ = true;
                break;
            }
        } else if (observer) {
            observer(rec, nullptr);
        }
    }
}

MetricsReport Trainer::evaluate_train(bool with_probe) const {
    return evaluate(*model_, train_, cfg_.data.task, with_probe);
}

std::optional<MetricsReport> Trainer::evaluate_held_out(bool with_probe) const {
    if (eval_.empty()) return std::nullopt;
    return evaluate(*model_, eval_, cfg_.data.task, with_probe);
}

Checkpoint Trainer::checkpoint() { return capture_checkpoint(cfg_, step_, *opt_); }

void Trainer::save(const std::filesystem::path& path) { save_checkpoint(checkpoint(), path); }

void Trainer::write_outputs() {
    if (cfg_.out_dir.empty()) return;
    const std::filesystem::path dir = cfg_.out_dir;
    std::filesystem::create_directories(dir);
    cfg_.save(dir / "config.txt");
    {
        std::ofstream out(dir / "train_log.csv");
        out << "step,dice,focal,avfs,total\n";
        out.precision(17);
        for (const auto& r : log_) {
            if (r.step % cfg_.log_every == 0 || r.step == step_) {
                out << r.step << ',' << r.dice << ',' << r.focal << ',' << r.avfs << ',' << r.total << "\n";
            }
        }
    }
    {
        std::ofstream out(dir / "eval_log.csv");
        out << "step,miou,fscore\n";
        out.precision(17);
        for (const auto& e : evals_) out << e.step << ',' << e.miou << ',' << e.fscore << "\n";
    }
    write_curves_svg(log_, evals_, dir / "curves.svg");
    save(dir / "checkpoint.bin");
    write_report(evaluate_train(true), dir / "train_report.jsonl");
    if (auto r = evaluate_held_out(true)) write_report(*r, dir / "eval_report.jsonl");
}

namespace {

std::string polyline(const std::vector<std::pair<double, double>>& pts, double x0, double y0, double w, double h,
                     double xmax, double ymin, double ymax, const char* color) {
    std::ostringstream os;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    const double span = ymax > ymin ? ymax - ymin : 1.0;
    for (const auto& [x, y] : pts) {
        os << x0 + w * x / std::max(xmax, 1.0) << ',' << y0 + h * (1 - (y - ymin) / span) << ' ';
    }
    os << "\"/>\n";
    return os.str();
}

}  // namespace

void write_curves_svg(const std::vector<StepLog>& log, const std::vector<EvalPoint>& evals,
                      const std::filesystem::path& path) {
    const double W = 360, H = 220, pad = 40;
    double xmax = 1;
    std::vector<std::pair<double, double>> loss, iou;
    double lmin = 1e300, lmax = -1e300;
    for (const auto& r : log) {
        const double y = std::log10(std::max(r.total, 1e-12));
        loss.emplace_back(static_cast<double>(r.step), y);
        lmin = std::min(lmin, y);
        lmax = std::max(lmax, y);
        xmax = std::max(xmax, static_cast<double>(r.step));
    }
    for (const auto& e : evals) iou.emplace_back(static_cast<double>(e.step), e.miou);
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * W + 3 * pad << "\" height=\"" << H + 2 * pad
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (int panel = 0; panel < 2; ++panel) {
        const double x0 = pad + panel * (W + pad);
        out << "<rect x=\"" << x0 << "\" y=\"" << pad << "\" width=\"" << W << "\" height=\"" << H
            << "\" fill=\"none\" stroke=\"#888\"/>\n";
        out << "<text x=\"" << x0 << "\" y=\"" << pad - 8 << "\">"
            << (panel == 0 ? "log10 total loss" : "train mIoU") << "</text>\n";
        out << "<text x=\"" << x0 + W - 60 << "\" y=\"" << pad + H + 16 << "\">step " << xmax << "</text>\n";
    }
    if (!loss.empty()) {
        out << polyline(loss, pad, pad, W, H, xmax, lmin, lmax, "#c0392b");
        out << "<text x=\"" << pad + 4 << "\" y=\"" << pad + 14 << "\">" << lmax << "</text>\n";
        out << "<text x=\"" << pad + 4 << "\" y=\"" << pad + H - 4 << "\">" << lmin << "</text>\n";
    }
    if (!iou.empty()) out << polyline(iou, 2 * pad + W, pad, W, H, xmax, 0.0, 1.0, "#2471a3");
    out << "</svg>\n";
}

}  // namespace avseg
