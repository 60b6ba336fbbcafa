#pragma once

// Deterministic toy audio-visual clips: flat-colored shapes moving on a
// canvas, each class with its own orthonormal audio signature. A pixel is
// foreground in frame t exactly when an object sounding in frame t covers it.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avseg/tensor.hpp"

namespace avseg {

enum class ShapeKind { circle, square, triangle };
enum class Task { s4, ms3, semantic };

std::string to_string(ShapeKind s);
std::string to_string(Task t);
ShapeKind parse_shape_kind(const std::string& s);
Task parse_task(const std::string& s);

struct Color {
    double r = 0, g = 0, b = 0;
};

struct SceneObject {
    ShapeKind shape = ShapeKind::circle;
    std::size_t class_id = 0;
    Color color;
    // Circle radius, square half-side, or triangle circumradius, in pixels.
    double radius = 8.0;
    double x0 = 0, y0 = 0;  // center in frame 0, pixels
    double vx = 0, vy = 0;  // pixels per frame
    std::vector<bool> sounding;  // one entry per frame

    double center_x(std::size_t t) const { return x0 + vx * static_cast<double>(t); }
    double center_y(std::size_t t) const { return y0 + vy * static_cast<double>(t); }
    // True when the pixel center (px, py) lies inside the object in frame t.
    bool covers(double px, double py, std::size_t t) const;
};

struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t frames = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    std::vector<SceneObject> objects;
    // signatures[c] is the unit audio vector of class c.
    std::vector<std::vector<double>> signatures;
    double audio_noise = 0.0;
    Color background{0.1, 0.1, 0.12};

    std::size_t audio_dim() const { return signatures.empty() ? 0 : signatures.front().size(); }
    // Throws SpecError on schedule-length mismatch, silent scenes, unknown
    // classes or objects leaving the canvas.
    void validate() const;
};

struct Clip {
    Tensor frames;       // [T, 3, H, W] in [0, 1]
    Tensor audio;        // [T, A]
    Tensor masks;        // [T, 1, H, W] binary union of sounding objects
    Tensor class_masks;  // [T, H, W] 0 = background, c + 1 = class c sounding
    SceneSpec spec;
};

Clip generate_clip(const SceneSpec& spec);

struct SplitConfig {
    Task task = Task::s4;
    std::size_t n_clips = 8;
    std::uint64_t seed = 0;
    std::size_t frames = 0;  // 0: 5 for s4/ms3, 10 for semantic
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t audio_dim = 16;
    std::size_t num_classes = 6;
    double audio_noise = 0.0;
    // Shared by every split so train and evaluation clips agree on classes.
    std::uint64_t signature_seed = 0x51;

    std::size_t resolved_frames() const;
};

std::vector<Clip> generate_split(const SplitConfig& cfg);

// Mutually orthogonal unit vectors (Gram-Schmidt on Gaussian draws).
std::vector<std::vector<double>> class_signatures(std::size_t num_classes, std::size_t audio_dim,
                                                  std::uint64_t seed);

// Fixed class appearance: shape cycles circle/square/triangle, color from a
// palette. Supports up to kMaxClasses classes.
inline constexpr std::size_t kMaxClasses = 8;
ShapeKind class_shape(std::size_t class_id);
Color class_color(std::size_t class_id);

// Directory layout (all binary data little-endian, row-major):
//   meta.txt     key=value echo of the scene spec
//   frames.bin   float64 [T, 3, H, W]
//   audio.bin    float64 [T, A]
//   labels.bin   uint8   [T, H, W], 0 background, c + 1 for sounding class c
// A split root holds one directory per clip plus manifest.txt listing them.
void save_clip(const Clip& clip, const std::filesystem::path& dir);
Clip load_clip(const std::filesystem::path& dir);
void save_split(const std::vector<Clip>& clips, const std::filesystem::path& root);
std::vector<Clip> load_split(const std::filesystem::path& root);

}  // namespace avseg
