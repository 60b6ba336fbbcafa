#include "avseg/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "avseg/errors.hpp"
#include "avseg/rng.hpp"

namespace avseg {

namespace fs = std::filesystem;

std::string to_string(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

std::string to_string(Task t) {
    switch (t) {
        case Task::s4: return "s4";
        case Task::ms3: return "ms3";
        case Task::semantic: return "semantic";
    }
    return "?";
}

ShapeKind parse_shape_kind(const std::string& s) {
    for (auto k : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle}) {
        if (to_string(k) == s) return k;
    }
    throw SpecError("unknown shape '" + s + "'");
}

Task parse_task(const std::string& s) {
    for (auto t : {Task::s4, Task::ms3, Task::semantic}) {
        if (to_string(t) == s) return t;
    }
    throw ConfigError("unknown task '" + s + "'");
}

ShapeKind class_shape(std::size_t class_id) {
    static constexpr ShapeKind kinds[] = {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
    return kinds[class_id % 3];
}

Color class_color(std::size_t class_id) {
    static constexpr Color palette[kMaxClasses] = {
        {0.90, 0.20, 0.20}, {0.20, 0.85, 0.30}, {0.25, 0.35, 0.95}, {0.95, 0.90, 0.20},
        {0.90, 0.30, 0.85}, {0.20, 0.90, 0.90}, {1.00, 0.60, 0.10}, {0.95, 0.95, 0.95},
    };
    if (class_id >= kMaxClasses) throw SpecError("class id " + std::to_string(class_id) + " has no appearance");
    return palette[class_id];
}

namespace {

constexpr double kSqrt3Half = 0.86602540378443864676;

// Half-extents of the object around its center: left/right, up, down.
struct Extent {
    double half_x, up, down;
};

Extent extent_of(const SceneObject& o) {
    if (o.shape == ShapeKind::triangle) return {o.radius * kSqrt3Half, o.radius, o.radius * 0.5};
    return {o.radius, o.radius, o.radius};
}

double bounding_radius(const SceneObject& o) {
    return o.shape == ShapeKind::square ? o.radius * std::numbers::sqrt2 : o.radius;
}

double edge(double ax, double ay, double bx, double by, double px, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

}  // namespace

bool SceneObject::covers(double px, double py, std::size_t t) const {
    const double cx = center_x(t), cy = center_y(t);
    const double dx = px - cx, dy = py - cy;
    switch (shape) {
        case ShapeKind::circle: return dx * dx + dy * dy <= radius * radius;
        case ShapeKind::square: return std::abs(dx) <= radius && std::abs(dy) <= radius;
        case ShapeKind::triangle: {
            // Upward-pointing equilateral triangle; y grows downwards.
            const double ax = cx, ay = cy - radius;
            const double bx = cx + radius * kSqrt3Half, by = cy + 0.5 * radius;
            const double qx = cx - radius * kSqrt3Half, qy = by;
            const double e0 = edge(ax, ay, bx, by, px, py);
            const double e1 = edge(bx, by, qx, qy, px, py);
            const double e2 = edge(qx, qy, ax, ay, px, py);
            return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
    }
    return false;
}

void SceneSpec::validate() const {
    if (frames == 0 || height == 0 || width == 0) throw SpecError("scene: empty canvas or no frames");
    if (signatures.empty()) throw SpecError("scene: no class signatures");
    const std::size_t A = signatures.front().size();
    for (const auto& s : signatures) {
        if (s.size() != A || A == 0) throw SpecError("scene: signatures have inconsistent length");
    }
    bool any_sound = false;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        const auto& o = objects[i];
        const std::string name = "scene: object " + std::to_string(i);
        if (o.sounding.size() != frames) throw SpecError(name + " has a schedule of the wrong length");
        if (o.class_id >= signatures.size()) throw SpecError(name + " has an unknown class");
        if (!(o.radius > 0)) throw SpecError(name + " has a non-positive size");
        const Extent e = extent_of(o);
        for (std::size_t t = 0; t < frames; ++t) {
            const double cx = o.center_x(t), cy = o.center_y(t);
            if (cx - e.half_x < 0 || cx + e.half_x > static_cast<double>(width) || cy - e.up < 0 ||
                cy + e.down > static_cast<double>(height)) {
                throw SpecError(name + " leaves the canvas in frame " + std::to_string(t));
            }
            any_sound = any_sound || o.sounding[t];
        }
    }
    if (!any_sound) throw SpecError("scene: no object sounds in any frame");
}

Clip generate_clip(const SceneSpec& spec) {
    spec.validate();
    const std::size_t T = spec.frames, H = spec.height, W = spec.width, A = spec.audio_dim();
    std::vector<double> frames(T * 3 * H * W);
    std::vector<double> masks(T * H * W, 0.0);
    std::vector<double> labels(T * H * W, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                const double py = static_cast<double>(y) + 0.5;
                Color c = spec.background;
                for (const auto& o : spec.objects) {
                    if (!o.covers(px, py, t)) continue;
                    c = o.color;
                    if (o.sounding[t]) {
                        masks[(t * H + y) * W + x] = 1.0;
                        labels[(t * H + y) * W + x] = static_cast<double>(o.class_id + 1);
                    }
                }
                const std::size_t plane = H * W;
                const std::size_t base = t * 3 * plane + y * W + x;
                frames[base] = c.r;
                frames[base + plane] = c.g;
                frames[base + 2 * plane] = c.b;
            }
        }
    }
    std::vector<double> audio(T * A, 0.0);
    Rng noise(mix_seed(spec.seed, 0xa0d10));
    for (std::size_t t = 0; t < T; ++t) {
        for (const auto& o : spec.objects) {
            if (!o.sounding[t]) continue;
            const auto& sig = spec.signatures[o.class_id];
            for (std::size_t a = 0; a < A; ++a) audio[t * A + a] += sig[a];
        }
        if (spec.audio_noise > 0) {
            for (std::size_t a = 0; a < A; ++a) audio[t * A + a] += noise.normal(0.0, spec.audio_noise);
        }
    }
    Clip clip;
    clip.frames = Tensor({T, 3, H, W}, std::move(frames));
    clip.audio = Tensor({T, A}, std::move(audio));
    clip.masks = Tensor({T, 1, H, W}, std::move(masks));
    clip.class_masks = Tensor({T, H, W}, std::move(labels));
    clip.spec = spec;
    return clip;
}

std::size_t SplitConfig::resolved_frames() const {
    if (frames > 0) return frames;
    return task == Task::semantic ? 10 : 5;
}

std::vector<std::vector<double>> class_signatures(std::size_t num_classes, std::size_t audio_dim,
                                                  std::uint64_t seed) {
    if (num_classes > audio_dim) {
        throw ConfigError("cannot build " + std::to_string(num_classes) + " orthogonal signatures in " +
                          std::to_string(audio_dim) + " dimensions");
    }
    Rng rng(mix_seed(seed, 0x5167));
    std::vector<std::vector<double>> basis;
    while (basis.size() < num_classes) {
        std::vector<double> v(audio_dim);
        for (auto& x : v) x = rng.normal();
        for (const auto& b : basis) {
            const double d = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
            for (std::size_t i = 0; i < audio_dim; ++i) v[i] -= d * b[i];
        }
        const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (n < 1e-6) continue;
        for (auto& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    return basis;
}

namespace {

// Distinct classes drawn without replacement.
std::vector<std::size_t> draw_classes(Rng& rng, std::size_t count, std::size_t num_classes) {
    std::vector<std::size_t> pool(num_classes);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.below(num_classes - i)]);
    pool.resize(count);
    return pool;
}

// Places `obj` (shape/radius already set) so that it stays on the canvas and
// clear of `placed` in every frame. Returns false after too many attempts.
bool place(Rng& rng, SceneObject& obj, const std::vector<SceneObject>& placed, std::size_t T, double H, double W) {
    const Extent e = extent_of(obj);
    const double span = static_cast<double>(T - 1);
    for (int attempt = 0; attempt < 200; ++attempt) {
        obj.vx = rng.uniform(-1.5, 1.5);
        obj.vy = rng.uniform(-1.5, 1.5);
        // Feasible start range so that both the first and last frame fit.
        const double lo_x = e.half_x + 1 - std::min(0.0, obj.vx * span);
        const double hi_x = W - e.half_x - 1 - std::max(0.0, obj.vx * span);
        const double lo_y = e.up + 1 - std::min(0.0, obj.vy * span);
        const double hi_y = H - e.down - 1 - std::max(0.0, obj.vy * span);
        if (lo_x >= hi_x || lo_y >= hi_y) continue;
        obj.x0 = rng.uniform(lo_x, hi_x);
        obj.y0 = rng.uniform(lo_y, hi_y);
        bool clear = true;
        for (const auto& other : placed) {
            const double need = bounding_radius(obj) + bounding_radius(other) + 2.0;
            for (std::size_t t = 0; t < T && clear; ++t) {
                const double dx = obj.center_x(t) - other.center_x(t);
                const double dy = obj.center_y(t) - other.center_y(t);
                clear = dx * dx + dy * dy >= need * need;
            }
            if (!clear) break;
        }
        if (clear) return true;
    }
    return false;
}

std::vector<bool> random_schedule(Rng& rng, std::size_t T, double p) {
    std::vector<bool> s(T);
    for (std::size_t t = 0; t < T; ++t) s[t] = rng.bernoulli(p);
    if (std::none_of(s.begin(), s.end(), [](bool b) { return b; })) s[rng.below(T)] = true;
    return s;
}

SceneSpec sample_scene(const SplitConfig& cfg, Rng& rng, std::uint64_t clip_seed,
                       const std::vector<std::vector<double>>& signatures) {
    const std::size_t T = cfg.resolved_frames();
    const double H = static_cast<double>(cfg.height), W = static_cast<double>(cfg.width);
    for (;;) {
        std::size_t n_sound = 1, n_silent = 1;
        switch (cfg.task) {
            case Task::s4:
                n_sound = 1;
                n_silent = 1 + rng.below(2);
                break;
            case Task::ms3:
                n_sound = 2 + rng.below(2);
                n_silent = rng.below(2);
                break;
            case Task::semantic:
                n_sound = 1 + rng.below(2);
                n_silent = rng.below(2);
                break;
        }
        const auto classes = draw_classes(rng, n_sound + n_silent, cfg.num_classes);
        SceneSpec spec;
        spec.seed = clip_seed;
        spec.frames = T;
        spec.height = cfg.height;
        spec.width = cfg.width;
        spec.signatures = signatures;
        spec.audio_noise = cfg.audio_noise;
        bool ok = true;
        for (std::size_t i = 0; i < classes.size() && ok; ++i) {
            SceneObject o;
            o.class_id = classes[i];
            o.shape = class_shape(o.class_id);
            o.color = class_color(o.class_id);
            o.radius = o.shape == ShapeKind::triangle ? rng.uniform(13.0, 16.0) : rng.uniform(9.0, 12.0);
            ok = place(rng, o, spec.objects, T, H, W);
            if (!ok) break;
            if (i >= n_sound) {
                o.sounding.assign(T, false);
            } else if (cfg.task == Task::s4) {
                o.sounding.assign(T, true);
            } else {
                o.sounding = random_schedule(rng, T, cfg.task == Task::ms3 ? 0.6 : 0.7);
            }
            spec.objects.push_back(std::move(o));
        }
        if (!ok) continue;
        if (cfg.task == Task::ms3) {
            // Every frame has a source, and some frame has two at once.
            for (std::size_t t = 0; t < T; ++t) {
                bool any = false;
                for (std::size_t i = 0; i < n_sound; ++i) any = any || spec.objects[i].sounding[t];
                if (!any) spec.objects[rng.below(n_sound)].sounding[t] = true;
            }
            const std::size_t t = rng.below(T);
            spec.objects[0].sounding[t] = true;
            spec.objects[1].sounding[t] = true;
        }
        return spec;
    }
}

}  // namespace

std::vector<Clip> generate_split(const SplitConfig& cfg) {
    if (cfg.n_clips < 1) throw ConfigError("split: n_clips must be >= 1");
    if (cfg.num_classes < 3 || cfg.num_classes > kMaxClasses) {
        throw ConfigError("split: num_classes must be in [3, " + std::to_string(kMaxClasses) + "]");
    }
    if (cfg.height % 32 != 0 || cfg.width % 32 != 0 || cfg.height < 64 || cfg.width < 64) {
        throw ConfigError("split: canvas must be at least 64x64 and a multiple of 32");
    }
    const auto signatures = class_signatures(cfg.num_classes, cfg.audio_dim, cfg.signature_seed);
    std::vector<Clip> clips;
    clips.reserve(cfg.n_clips);
    for (std::size_t i = 0; i < cfg.n_clips; ++i) {
        const std::uint64_t clip_seed = mix_seed(cfg.seed, i);
        Rng rng(clip_seed);
        clips.push_back(generate_clip(sample_scene(cfg, rng, clip_seed, signatures)));
    }
    return clips;
}

namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

void write_f64(const fs::path& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<double> read_f64(const fs::path& path, std::size_t count) {
    const auto bytes = read_bytes(path);
    if (bytes.size() != count * 8) {
        throw LoadError(path.string() + ": expected " + std::to_string(count * 8) + " bytes, found " +
                        std::to_string(bytes.size()));
    }
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

}  // namespace

void save_clip(const Clip& clip, const fs::path& dir) {
    fs::create_directories(dir);
    const auto& spec = clip.spec;
    std::ofstream meta(dir / "meta.txt");
    if (!meta) throw LoadError("cannot write " + (dir / "meta.txt").string());
    meta << "format=avseg-clip-1\n";
    meta << "seed=" << spec.seed << "\n";
    meta << "frames=" << spec.frames << "\nheight=" << spec.height << "\nwidth=" << spec.width << "\n";
    meta << "audio_dim=" << spec.audio_dim() << "\nnum_classes=" << spec.signatures.size() << "\n";
    meta << "audio_noise=" << fmt_double(spec.audio_noise) << "\n";
    meta << "background=" << fmt_double(spec.background.r) << ',' << fmt_double(spec.background.g) << ','
         << fmt_double(spec.background.b) << "\n";
    for (std::size_t c = 0; c < spec.signatures.size(); ++c) {
        meta << "signature." << c << '=';
        for (std::size_t a = 0; a < spec.signatures[c].size(); ++a) {
            meta << (a ? "," : "") << fmt_double(spec.signatures[c][a]);
        }
        meta << "\n";
    }
    meta << "objects=" << spec.objects.size() << "\n";
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const auto& o = spec.objects[i];
        const std::string p = "object." + std::to_string(i) + ".";
        meta << p << "shape=" << to_string(o.shape) << "\n" << p << "class=" << o.class_id << "\n";
        meta << p << "color=" << fmt_double(o.color.r) << ',' << fmt_double(o.color.g) << ','
             << fmt_double(o.color.b) << "\n";
        meta << p << "radius=" << fmt_double(o.radius) << "\n";
        meta << p << "motion=" << fmt_double(o.x0) << ',' << fmt_double(o.y0) << ',' << fmt_double(o.vx) << ','
             << fmt_double(o.vy) << "\n";
        meta << p << "sounding=";
        for (bool b : o.sounding) meta << (b ? '1' : '0');
        meta << "\n";
    }
    write_f64(dir / "frames.bin", clip.frames.data());
    write_f64(dir / "audio.bin", clip.audio.data());
    const auto labels = clip.class_masks.data();
    std::vector<unsigned char> bytes(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) bytes[i] = static_cast<unsigned char>(labels[i]);
    std::ofstream out(dir / "labels.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Clip load_clip(const fs::path& dir) {
    std::ifstream meta(dir / "meta.txt");
    if (!meta) throw LoadError("missing " + (dir / "meta.txt").string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw LoadError(dir.string() + ": meta.txt lacks '" + key + "'");
        return it->second;
    };
    if (get("format") != "avseg-clip-1") throw LoadError(dir.string() + ": unsupported clip format");
    SceneSpec spec;
    try {
        spec.seed = std::stoull(get("seed"));
        spec.frames = std::stoull(get("frames"));
        spec.height = std::stoull(get("height"));
        spec.width = std::stoull(get("width"));
        spec.audio_noise = std::stod(get("audio_noise"));
        const auto bg = parse_list(get("background"));
        if (bg.size() != 3) throw LoadError("bad background");
        spec.background = {bg[0], bg[1], bg[2]};
        const std::size_t nc = std::stoull(get("num_classes"));
        for (std::size_t c = 0; c < nc; ++c) spec.signatures.push_back(parse_list(get("signature." + std::to_string(c))));
        const std::size_t no = std::stoull(get("objects"));
        for (std::size_t i = 0; i < no; ++i) {
            const std::string p = "object." + std::to_string(i) + ".";
            SceneObject o;
            o.shape = parse_shape_kind(get(p + "shape"));
            o.class_id = std::stoull(get(p + "class"));
            const auto col = parse_list(get(p + "color"));
            const auto mot = parse_list(get(p + "motion"));
            if (col.size() != 3 || mot.size() != 4) throw LoadError("bad object record");
            o.color = {col[0], col[1], col[2]};
            o.radius = std::stod(get(p + "radius"));
            o.x0 = mot[0];
            o.y0 = mot[1];
            o.vx = mot[2];
            o.vy = mot[3];
            for (char ch : get(p + "sounding")) o.sounding.push_back(ch == '1');
            spec.objects.push_back(std::move(o));
        }
    } catch (const std::logic_error& e) {
        throw LoadError(dir.string() + ": malformed meta.txt (" + e.what() + ")");
    }
    const std::size_t T = spec.frames, H = spec.height, W = spec.width, A = spec.audio_dim();
    Clip clip;
    clip.spec = spec;
    clip.frames = Tensor({T, 3, H, W}, read_f64(dir / "frames.bin", T * 3 * H * W));
    clip.audio = Tensor({T, A}, read_f64(dir / "audio.bin", T * A));
    const auto bytes = read_bytes(dir / "labels.bin");
    if (bytes.size() != T * H * W) throw LoadError(dir.string() + ": labels.bin has the wrong size");
    std::vector<double> labels(bytes.begin(), bytes.end());
    std::vector<double> masks(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) masks[i] = labels[i] > 0 ? 1.0 : 0.0;
    clip.class_masks = Tensor({T, H, W}, std::move(labels));
    clip.masks = Tensor({T, 1, H, W}, std::move(masks));
    return clip;
}

void save_split(const std::vector<Clip>& clips, const fs::path& root) {
    fs::create_directories(root);
    std::ofstream manifest(root / "manifest.txt");
    if (!manifest) throw LoadError("cannot write " + (root / "manifest.txt").string());
    for (std::size_t i = 0; i < clips.size(); ++i) {
        std::ostringstream name;
        name << "clip_" << std::setw(5) << std::setfill('0') << i;
        save_clip(clips[i], root / name.str());
        manifest << name.str() << "\n";
    }
}

std::vector<Clip> load_split(const fs::path& root) {
    std::ifstream manifest(root / "manifest.txt");
    if (!manifest) throw LoadError("missing " + (root / "manifest.txt").string());
    std::vector<Clip> clips;
    std::string line;
    while (std::getline(manifest, line)) {
        if (!line.empty()) clips.push_back(load_clip(root / line));
    }
    return clips;
}

}  // namespace avseg
