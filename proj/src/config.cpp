#include "avseg/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "avseg/errors.hpp"

namespace avseg {

SplitConfig DataConfig::train_split() const {
    SplitConfig s;
    s.task = task;
    s.n_clips = n_clips;
    s.seed = seed;
    s.frames = frames;
    s.height = height;
    s.width = width;
    s.audio_dim = audio_dim;
    s.num_classes = num_classes;
    s.audio_noise = audio_noise;
    return s;
}

SplitConfig DataConfig::eval_split() const {
    SplitConfig s = train_split();
    s.n_clips = eval_clips;
    s.seed = eval_seed;
    return s;
}

ModelConfig RunConfig::resolved_model() const {
    ModelConfig m = model;
    m.frames = data.train_split().resolved_frames();
    m.height = data.height;
    m.width = data.width;
    m.audio_dim = data.audio_dim;
    m.num_classes = data.task == Task::semantic ? data.num_classes : 1;
    return m;
}

void RunConfig::validate() const {
    resolved_model().validate();
    if (data.n_clips < 1) throw ConfigError("data.n_clips must be >= 1");
    if (!(optim.lr > 0)) throw ConfigError("optim.lr must be positive");
    if (optim.batch < 1) throw ConfigError("optim.batch must be >= 1");
    if (optim.weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
    if (!(optim.beta1 >= 0 && optim.beta1 < 1) || !(optim.beta2 >= 0 && optim.beta2 < 1)) {
        throw ConfigError("optim betas must lie in [0, 1)");
    }
    if (!(optim.eps > 0)) throw ConfigError("optim.eps must be positive");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T parse_uint(const std::string& key, const std::string& v) {
    T out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not an unsigned integer");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::logic_error&) {
        throw ConfigError(key + ": '" + v + "' is not a number");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean");
}

struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_FIELD(KEY, MEMBER)                                                                     \
    Field {                                                                                         \
        KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                           \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_uint<std::size_t>(KEY, v); } \
    }
#define U64_FIELD(KEY, MEMBER)                                                                        \
    Field {                                                                                           \
        KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                             \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_uint<std::uint64_t>(KEY, v); } \
    }
#define DOUBLE_FIELD(KEY, MEMBER)                                                                                   \
    Field {                                                                                                         \
        KEY, [](const RunConfig& c) { return fmt(c.MEMBER); },                                                      \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_double(KEY, v); }                             \
    }
#define BOOL_FIELD(KEY, MEMBER)                                                                                     \
    Field {                                                                                                         \
        KEY, [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); },                           \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }                              \
    }
#define ENUM_FIELD(KEY, MEMBER, PARSE)                                                                              \
    Field {                                                                                                         \
        KEY, [](const RunConfig& c) { return to_string(c.MEMBER); },                                                \
            [](RunConfig& c, const std::string& v) { c.MEMBER = PARSE(v); }                                         \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        ENUM_FIELD("data.task", data.task, parse_task),
        SIZE_FIELD("data.n_clips", data.n_clips),
        U64_FIELD("data.seed", data.seed),
        SIZE_FIELD("data.eval_clips", data.eval_clips),
        U64_FIELD("data.eval_seed", data.eval_seed),
        SIZE_FIELD("data.frames", data.frames),
        SIZE_FIELD("data.height", data.height),
        SIZE_FIELD("data.width", data.width),
        SIZE_FIELD("data.audio_dim", data.audio_dim),
        SIZE_FIELD("data.num_classes", data.num_classes),
        DOUBLE_FIELD("data.audio_noise", data.audio_noise),
        Field{"data.root", [](const RunConfig& c) { return c.data.root; },
              [](RunConfig& c, const std::string& v) { c.data.root = v; }},
        SIZE_FIELD("model.num_layers", model.num_layers),
        SIZE_FIELD("model.model_dim", model.model_dim),
        SIZE_FIELD("model.num_queries", model.num_queries),
        SIZE_FIELD("model.num_heads", model.num_heads),
        SIZE_FIELD("model.num_points", model.num_points),
        SIZE_FIELD("model.ffn_expansion", model.ffn_expansion),
        ENUM_FIELD("model.bridge", model.bridge, parse_bridge_mode),
        ENUM_FIELD("model.fusion", model.fusion, parse_fusion_mode),
        ENUM_FIELD("model.query_integration", model.query_integration, parse_query_integration),
        BOOL_FIELD("model.agca_output_projection", model.agca_output_projection),
        BOOL_FIELD("model.audio_encoder_bias", model.audio_encoder_bias),
        BOOL_FIELD("model.visual_tokens_enabled", model.visual_tokens_enabled),
        U64_FIELD("model.init_seed", model.init_seed),
        ENUM_FIELD("loss.seg", loss.seg, parse_seg_loss),
        ENUM_FIELD("loss.sync", loss.sync, parse_sync_loss),
        ENUM_FIELD("loss.axis", loss.axis, parse_softmax_axis),
        DOUBLE_FIELD("loss.focal_alpha", loss.focal_alpha),
        DOUBLE_FIELD("loss.focal_gamma", loss.focal_gamma),
        DOUBLE_FIELD("loss.dice_smooth", loss.dice_smooth),
        DOUBLE_FIELD("loss.dice_weight", loss.dice_weight),
        DOUBLE_FIELD("loss.focal_weight", loss.focal_weight),
        DOUBLE_FIELD("loss.sync_weight", loss.sync_weight),
        DOUBLE_FIELD("optim.lr", optim.lr),
        DOUBLE_FIELD("optim.weight_decay", optim.weight_decay),
        DOUBLE_FIELD("optim.beta1", optim.beta1),
        DOUBLE_FIELD("optim.beta2", optim.beta2),
        DOUBLE_FIELD("optim.eps", optim.eps),
        SIZE_FIELD("optim.steps", optim.steps),
        SIZE_FIELD("optim.batch", optim.batch),
        U64_FIELD("seed", seed),
        SIZE_FIELD("eval_every", eval_every),
        DOUBLE_FIELD("target_miou", target_miou),
        SIZE_FIELD("log_every", log_every),
        Field{"out_dir", [](const RunConfig& c) { return c.out_dir; },
              [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
    };
    return f;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (key == f.key) {
            try {
                f.set(*this, value);
            } catch (const ConfigError&) {
                throw;
            } catch (const std::invalid_argument& e) {
                throw ConfigError(key + ": " + e.what());
            }
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
    return out;
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : items()) os << k << " = " << v << "\n";
    return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out << to_text();
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

}  // namespace avseg
