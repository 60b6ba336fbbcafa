#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "avseg/checkpoint.hpp"
#include "avseg/config.hpp"
#include "avseg/metrics.hpp"
#include "avseg/model.hpp"
#include "avseg/optimizer.hpp"
#include "avseg/synthdata.hpp"

namespace avseg {

struct StepLog {
    std::size_t step = 0;  // 1-based index of the optimizer step
    double dice = 0, focal = 0, avfs = 0, total = 0;
};

struct EvalPoint {
    std::size_t step = 0;
    double miou = 0, fscore = 0;
};

// Loss target for a clip: the binary mask for s4/ms3, one-hot class planes
// [T, C, H, W] for the semantic task.
Tensor clip_target(const Clip& clip, Task task, std::size_t num_classes);

// Clip indices used by optimizer step `step` (0-based). Each epoch visits the
// clips in a permutation derived from (seed, epoch) alone.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t n_clips, std::size_t batch, std::size_t step);

// No-gradient evaluation, one clip at a time. The probe adds three forward
// passes per clip.
MetricsReport evaluate(const AvsModel& model, const std::vector<Clip>& clips, Task task, bool with_probe = true);

class Trainer {
public:
    explicit Trainer(const RunConfig& cfg);
    Trainer(const RunConfig& cfg, std::vector<Clip> train_clips, std::vector<Clip> eval_clips);
    // Rebuilds the run from a checkpoint; the data is regenerated from its config.
    static Trainer resume(const std::filesystem::path& checkpoint);

    // One forward/backward/update. Throws NonFiniteError naming the term.
    StepLog step();
    // Steps until cfg.optim.steps in total, or until the periodic train-split
    // mIoU reaches cfg.target_miou. The observer sees every step, and the
    // evaluation point on steps that were evaluated.
    using Observer = std::function<void(const StepLog&, const EvalPoint*)>;
    void run(const Observer& observer = {});

    MetricsReport evaluate_train(bool with_probe = true) const;
    std::optional<MetricsReport> evaluate_held_out(bool with_probe = true) const;

    Checkpoint checkpoint();
    void save(const std::filesystem::path& path);
    // Writes config, logs, curves, checkpoint and reports into cfg.out_dir.
    void write_outputs();

    const RunConfig& config() const { return cfg_; }
    AvsModel& model() { return *model_; }
    const AvsModel& model() const { return *model_; }
    AdamW& optimizer() { return *opt_; }
    std::size_t steps_done() const { return step_; }
    const std::vector<StepLog>& log() const { return log_; }
    const std::vector<EvalPoint>& evals() const { return evals_; }
    const std::vector<Clip>& train_clips() const { return train_; }
    bool reached_target() const { return reached_target_; }

private:
    RunConfig cfg_;
    std::vector<Clip> train_, eval_;
    std::vector<Tensor> targets_;
    std::unique_ptr<AvsModel> model_;
    std::unique_ptr<AdamW> opt_;
    std::size_t step_ = 0;
    std::vector<StepLog> log_;
    std::vector<EvalPoint> evals_;
    bool reached_target_ = false;
};

std::vector<Clip> load_or_generate_train(const DataConfig& data);

// Minimal SVG line chart of training loss and evaluation mIoU.
void write_curves_svg(const std::vector<StepLog>& log, const std::vector<EvalPoint>& evals,
                      const std::filesystem::path& path);

}  // namespace avseg
