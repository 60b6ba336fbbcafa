#pragma once

// Experiment configuration stored as "key = value" text. Every field has a
// default and doubles are written with 17 significant digits, so a config
// survives a save/load cycle unchanged.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avseg/bavd.hpp"
#include "avseg/losses.hpp"
#include "avseg/synthdata.hpp"

namespace avseg {

struct DataConfig {
    Task task = Task::s4;
    std::size_t n_clips = 8;
    std::uint64_t seed = 0;
    std::size_t eval_clips = 0;  // held-out clips; 0 evaluates on the training split
    std::uint64_t eval_seed = 1000;
    std::size_t frames = 0;  // 0: task default
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t audio_dim = 16;
    std::size_t num_classes = 6;
    double audio_noise = 0.0;
    std::string root;  // load the training split from disk instead of generating it

    SplitConfig train_split() const;
    SplitConfig eval_split() const;
};

struct OptimConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t steps = 2000;
    std::size_t batch = 4;  // clips per step, stacked along the frame axis
};

struct RunConfig {
    DataConfig data;
    ModelConfig model;  // frames/height/width/audio_dim/num_classes follow data
    LossConfig loss;
    OptimConfig optim;
    std::uint64_t seed = 0;          // clip order
    std::size_t eval_every = 50;     // steps between train-split evaluations; 0 disables
    double target_miou = 0.0;        // stop early once train mIoU reaches this; 0 disables
    std::size_t log_every = 1;
    std::string out_dir;             // empty: nothing written

    // Model configuration with the data-dependent fields filled in.
    ModelConfig resolved_model() const;
    void validate() const;

    std::string to_text() const;
    static RunConfig from_text(const std::string& text);
    // Applies one "key=value" assignment; unknown keys throw ConfigError.
    void set(const std::string& key, const std::string& value);
    std::vector<std::pair<std::string, std::string>> items() const;

    void save(const std::filesystem::path& path) const;
    static RunConfig load(const std::filesystem::path& path);
};

}  // namespace avseg
