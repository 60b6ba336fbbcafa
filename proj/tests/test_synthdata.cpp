#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "avseg/errors.hpp"
#include "avseg/synthdata.hpp"

using namespace avseg;

namespace {

SceneSpec base_scene(std::size_t frames = 4) {
    SceneSpec s;
    s.seed = 5;
    s.frames = frames;
    s.signatures = class_signatures(4, 8, 17);
    return s;
}

SceneObject object(ShapeKind shape, std::size_t cls, double x, double y, double r, std::vector<bool> sounding) {
    SceneObject o;
    o.shape = shape;
    o.class_id = cls;
    o.color = class_color(cls);
    o.radius = r;
    o.x0 = x;
    o.y0 = y;
    o.sounding = std::move(sounding);
    return o;
}

double mask_sum(const Clip& c, std::size_t t) {
    const std::size_t HW = c.masks.shape()[2] * c.masks.shape()[3];
    double s = 0;
    for (std::size_t i = 0; i < HW; ++i) s += c.masks.data()[t * HW + i];
    return s;
}

double dot(std::span<const double> row, const std::vector<double>& sig) {
    double s = 0;
    for (std::size_t i = 0; i < sig.size(); ++i) s += row[i] * sig[i];
    return s;
}

// Sounding-class counts of frame t recovered by projecting the audio row onto
// every signature.
std::vector<long> decompose(const Clip& c, std::size_t t) {
    const std::size_t A = c.audio.shape()[1];
    std::vector<long> out;
    for (const auto& sig : c.spec.signatures) out.push_back(std::lround(dot(c.audio.data().subspan(t * A, A), sig)));
    return out;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("avseg_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("static sounding circle rasterizes to a disc") {
    for (double r : {8.0, 10.5, 14.0}) {
        SceneSpec s = base_scene();
        s.objects.push_back(object(ShapeKind::circle, 0, 31.3, 32.7, r, {true, true, true, true}));
        const Clip c = generate_clip(s);
        const double area = std::numbers::pi * r * r;
        for (std::size_t t = 0; t < 4; ++t) {
            CHECK(std::abs(mask_sum(c, t) - area) / area < 0.1);
            CHECK(mask_sum(c, t) == mask_sum(c, 0));
        }
        // Exact pixel-center membership.
        for (std::size_t y = 0; y < 64; ++y) {
            for (std::size_t x = 0; x < 64; ++x) {
                const double dx = x + 0.5 - 31.3, dy = y + 0.5 - 32.7;
                CHECK(c.masks.at({2, 0, y, x}) == (dx * dx + dy * dy <= r * r ? 1.0 : 0.0));
            }
        }
    }
}

TEST_CASE("silent objects are visible but excluded from the mask") {
    SceneSpec s = base_scene();
    s.objects.push_back(object(ShapeKind::circle, 0, 16, 16, 8, {true, true, false, false}));
    s.objects.push_back(object(ShapeKind::square, 1, 46, 46, 8, {false, true, false, false}));
    const Clip c = generate_clip(s);
    const Color sq = class_color(1);
    CHECK(c.frames.at({0, 0, 46, 46}) == sq.r);
    CHECK(c.frames.at({0, 1, 46, 46}) == sq.g);
    CHECK(c.masks.at({0, 0, 46, 46}) == 0.0);
    CHECK(c.masks.at({1, 0, 46, 46}) == 1.0);
    CHECK(c.class_masks.at({1, 46, 46}) == 2.0);
    CHECK(c.class_masks.at({1, 16, 16}) == 1.0);
    // No source in frames 2 and 3.
    CHECK(mask_sum(c, 2) == 0.0);
    CHECK(mask_sum(c, 3) == 0.0);
    for (double v : c.frames.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("moving triangle and overlap order") {
    SceneSpec s = base_scene(3);
    auto tri = object(ShapeKind::triangle, 2, 20, 30, 12, {true, true, true});
    tri.vx = 5;
    s.objects.push_back(tri);
    s.objects.push_back(object(ShapeKind::square, 3, 20, 30, 4, {false, false, false}));
    const Clip c = generate_clip(s);
    // The later, silent square is painted over the triangle but the mask keeps the sounding triangle.
    CHECK(c.frames.at({0, 0, 30, 20}) == class_color(3).r);
    CHECK(c.masks.at({0, 0, 30, 20}) == 1.0);
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t y = 0; y < 64; ++y) {
            for (std::size_t x = 0; x < 64; ++x) {
                CHECK(c.masks.at({t, 0, y, x}) == (tri.covers(x + 0.5, y + 0.5, t) ? 1.0 : 0.0));
            }
        }
    }
    CHECK(mask_sum(c, 0) == mask_sum(c, 2));
}

TEST_CASE("scene validation") {
    SceneSpec s = base_scene();
    s.objects.push_back(object(ShapeKind::circle, 0, 32, 32, 8, {true, true, true}));
    CHECK_THROWS_AS(generate_clip(s), SpecError);
    s.objects[0].sounding.push_back(true);
    s.objects[0].vx = 10;
    CHECK_THROWS_AS(generate_clip(s), SpecError);
    s.objects[0].vx = 0;
    s.objects[0].sounding.assign(4, false);
    CHECK_THROWS_AS(generate_clip(s), SpecError);
    s.objects[0].sounding.assign(4, true);
    s.objects[0].class_id = 9;
    CHECK_THROWS_AS(generate_clip(s), SpecError);
    s.objects[0].class_id = 0;
    CHECK_NOTHROW(generate_clip(s));
}

TEST_CASE("class signatures are orthonormal") {
    const auto sig = class_signatures(8, 16, 3);
    for (std::size_t i = 0; i < 8; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            double d = 0;
            for (std::size_t k = 0; k < 16; ++k) d += sig[i][k] * sig[j][k];
            CHECK(std::abs(d - (i == j ? 1.0 : 0.0)) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(class_signatures(5, 4, 3), ConfigError);
}

TEST_CASE("audio rows decompose into the sounding classes") {
    for (auto task : {Task::s4, Task::ms3, Task::semantic}) {
        SplitConfig cfg;
        cfg.task = task;
        cfg.n_clips = 6;
        cfg.seed = 21;
        for (const auto& c : generate_split(cfg)) {
            const std::size_t A = c.audio.shape()[1];
            for (std::size_t t = 0; t < c.spec.frames; ++t) {
                std::vector<long> expect(c.spec.signatures.size(), 0);
                for (const auto& o : c.spec.objects) expect[o.class_id] += o.sounding[t] ? 1 : 0;
                CHECK(decompose(c, t) == expect);
                // Exact reconstruction from the signatures.
                for (std::size_t k = 0; k < A; ++k) {
                    double r = 0;
                    for (std::size_t cls = 0; cls < expect.size(); ++cls) r += expect[cls] * c.spec.signatures[cls][k];
                    CHECK(std::abs(c.audio.at({t, k}) - r) <= 1e-12);
                }
            }
        }
    }
}

TEST_CASE("task structure") {
    SplitConfig cfg;
    cfg.n_clips = 12;
    cfg.seed = 8;
    SUBCASE("s4 has one sounding class per clip") {
        for (const auto& c : generate_split(cfg)) {
            std::set<std::size_t> classes;
            for (std::size_t t = 0; t < c.spec.frames; ++t) {
                const auto d = decompose(c, t);
                for (std::size_t k = 0; k < d.size(); ++k) {
                    if (d[k] != 0) classes.insert(k);
                }
            }
            CHECK(classes.size() == 1);
            CHECK(c.spec.frames == 5);
        }
    }
    SUBCASE("ms3 has a frame with two simultaneous sources") {
        cfg.task = Task::ms3;
        for (const auto& c : generate_split(cfg)) {
            std::size_t best = 0, sounding_objects = 0;
            for (const auto& o : c.spec.objects) {
                bool any = false;
                for (bool b : o.sounding) any = any || b;
                sounding_objects += any;
            }
            for (std::size_t t = 0; t < c.spec.frames; ++t) {
                std::size_t n = 0;
                for (const auto& o : c.spec.objects) n += o.sounding[t];
                best = std::max(best, n);
            }
            CHECK(best >= 2);
            CHECK(sounding_objects >= 2);
            CHECK(sounding_objects <= 3);
        }
    }
    SUBCASE("semantic uses ten frames and at least three classes") {
        cfg.task = Task::semantic;
        std::set<double> labels;
        for (const auto& c : generate_split(cfg)) {
            CHECK(c.frames.shape()[0] == 10);
            for (double v : c.class_masks.data()) labels.insert(v);
        }
        CHECK(labels.size() >= 4);  // background plus three classes
    }
    SUBCASE("invalid split configuration") {
        cfg.num_classes = 2;
        CHECK_THROWS_AS(generate_split(cfg), ConfigError);
        cfg.num_classes = 6;
        cfg.height = 48;
        CHECK_THROWS_AS(generate_split(cfg), ConfigError);
        cfg.height = 64;
        cfg.n_clips = 0;
        CHECK_THROWS_AS(generate_split(cfg), ConfigError);
    }
}

TEST_CASE("splits are deterministic per seed") {
    SplitConfig cfg;
    cfg.task = Task::ms3;
    cfg.n_clips = 4;
    cfg.seed = 99;
    cfg.audio_noise = 0.05;
    const auto a = generate_split(cfg), b = generate_split(cfg);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(a[i].frames.to_vector() == b[i].frames.to_vector());
        CHECK(a[i].audio.to_vector() == b[i].audio.to_vector());
        CHECK(a[i].masks.to_vector() == b[i].masks.to_vector());
    }
    cfg.seed = 100;
    CHECK(generate_split(cfg)[0].frames.to_vector() != a[0].frames.to_vector());
}

TEST_CASE("split save and load round trip") {
    SplitConfig cfg;
    cfg.task = Task::semantic;
    cfg.n_clips = 3;
    cfg.seed = 4;
    cfg.audio_noise = 0.1;
    const auto clips = generate_split(cfg);
    const auto dir = temp_dir("split");
    save_split(clips, dir);
    const auto back = load_split(dir);
    REQUIRE(back.size() == clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) {
        CHECK(back[i].frames.to_vector() == clips[i].frames.to_vector());
        CHECK(back[i].audio.to_vector() == clips[i].audio.to_vector());
        CHECK(back[i].masks.to_vector() == clips[i].masks.to_vector());
        CHECK(back[i].class_masks.to_vector() == clips[i].class_masks.to_vector());
        CHECK(back[i].spec.objects.size() == clips[i].spec.objects.size());
        CHECK(back[i].spec.objects[0].x0 == clips[i].spec.objects[0].x0);
        CHECK(back[i].spec.objects[0].sounding == clips[i].spec.objects[0].sounding);
        CHECK(back[i].spec.signatures == clips[i].spec.signatures);
    }
    std::filesystem::resize_file(dir / "clip_00001" / "audio.bin", 16);
    CHECK_THROWS_AS(load_split(dir), LoadError);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_split(dir), LoadError);
}

TEST_CASE("names parse back") {
    for (auto t : {Task::s4, Task::ms3, Task::semantic}) CHECK(parse_task(to_string(t)) == t);
    for (auto s : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle}) CHECK(parse_shape_kind(to_string(s)) == s);
    CHECK_THROWS_AS(parse_task("s5"), ConfigError);
}
