#pragma once

// Mask metrics (Jaccard index, F-measure) and the modality-balance probe.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "avseg/model.hpp"

namespace avseg {

// Thresholds probabilities: 1 where p > threshold, else 0.
Tensor binarize(const Tensor& probs, double threshold = 0.5);

// pred and gt are binary mask sets with the frame on axis 0 ([T, ...]).
// A frame where both masks are empty counts as IoU 1.
std::vector<double> frame_iou(const Tensor& pred, const Tensor& gt);
double miou(const Tensor& pred, const Tensor& gt);

// Per-frame (1 + b) P R / (b P + R) with b = beta_sq. A frame where both masks
// are empty scores 1; any other frame with a zero denominator scores 0.
std::vector<double> frame_fscore(const Tensor& pred, const Tensor& gt, double beta_sq = 0.3);
double fscore(const Tensor& pred, const Tensor& gt, double beta_sq = 0.3);

// Accumulates intersections and unions per class over label maps
// (0 = background, c + 1 = class c).
class ClassIou {
public:
    explicit ClassIou(std::size_t num_classes);
    void add(const Tensor& pred_labels, const Tensor& gt_labels);
    // Classes never present in either prediction or ground truth are absent.
    std::map<std::size_t, double> per_class() const;
    double mean() const;

private:
    std::vector<double> inter_, uni_;
};

// Label map [T, H, W] from per-class logits [T, C, H, W]: the argmax class
// where its sigmoid exceeds the threshold, background otherwise.
Tensor predicted_labels(const Tensor& logits, double threshold = 0.5);
// Foreground mask [T, 1, H, W] from logits of any channel count.
Tensor predicted_foreground(const Tensor& logits, double threshold = 0.5);

struct ModalityBalance {
    double audio_share = 0.5;
    double visual_share = 0.5;
    double audio_delta = 0.0;   // ||F* - F*(audio zeroed)||
    double visual_delta = 0.0;  // ||F* - F*(frames replaced by their mean)||
    bool degenerate = false;    // both deltas zero
};

// Input-ablation probe on the fused pre-classifier feature. The visual
// ablation replaces every pixel by the per-channel mean over all frames and
// positions of the clip.
ModalityBalance modality_balance_probe(const AvsModel& model, const Tensor& frames, const Tensor& audio);

struct ClipMetrics {
    std::size_t index = 0;
    double miou = 0.0;
    double fscore = 0.0;
    ModalityBalance balance;
};

struct MetricsReport {
    std::vector<ClipMetrics> clips;
    double miou = 0.0;
    double fscore = 0.0;
    double audio_share = 0.0;
    double visual_share = 0.0;
    // Semantic task only.
    std::map<std::size_t, double> class_iou;
    std::optional<double> class_miou;

    // Recomputes the aggregates as means of the per-clip values.
    void finalize();
};

// One JSON object per line: a "clip" record per clip, then an "aggregate".
std::string to_jsonl(const MetricsReport& report);
MetricsReport report_from_jsonl(const std::string& text);
void write_report(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace avseg
