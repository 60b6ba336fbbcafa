#include "avseg/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "avseg/errors.hpp"

namespace avseg {

namespace {

constexpr char kMagic[8] = {'A', 'V', 'S', 'E', 'G', 'C', 'K', 'P'};

class Writer {
public:
    void u32(std::uint32_t x) { put(x, 4); }
    void u64(std::uint64_t x) { put(x, 8); }
    void f64s(const std::vector<double>& xs) {
        for (double x : xs) put(std::bit_cast<std::uint64_t>(x), 8);
    }
    void bytes(const std::string& s) { buf.insert(buf.end(), s.begin(), s.end()); }
    std::vector<char> buf;

private:
    void put(std::uint64_t x, int n) {
        for (int i = 0; i < n; ++i) buf.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
    }
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : d_(std::move(data)) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    std::vector<double> f64s(std::size_t n) {
        need(n * 8);
        std::vector<double> out(n);
        for (auto& x : out) x = std::bit_cast<double>(get(8));
        return out;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(d_.begin() + static_cast<std::ptrdiff_t>(pos_), d_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == d_.size(); }

private:
    void need(std::size_t n) const {
        if (d_.size() - pos_ < n) throw LoadError("checkpoint: truncated file");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t x = 0;
        for (int i = 0; i < n; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_++])) << (8 * i);
        return x;
    }
    std::vector<char> d_;
    std::size_t pos_ = 0;
};

}  // namespace

Checkpoint capture_checkpoint(const RunConfig& cfg, std::uint64_t step, AdamW& opt) {
    Checkpoint c;
    c.config = cfg;
    c.step = step;
    c.optimizer_steps = opt.steps_taken();
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = params[i];
        c.params.push_back({name, t.shape(), t.to_vector(), opt.first_moments()[i], opt.second_moments()[i]});
    }
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    Writer w;
    w.bytes(std::string(kMagic, sizeof kMagic));
    w.u32(kCheckpointVersion);
    const std::string text = ckpt.config.to_text();
    w.u64(text.size());
    w.bytes(text);
    w.u64(ckpt.step);
    w.u64(ckpt.optimizer_steps);
    w.u64(ckpt.params.size());
    for (const auto& p : ckpt.params) {
        w.u32(static_cast<std::uint32_t>(p.name.size()));
        w.bytes(p.name);
        w.u64(p.shape.size());
        for (auto d : p.shape) w.u64(d);
        w.f64s(p.values);
        w.f64s(p.m);
        w.f64s(p.v);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw LoadError("cannot write " + tmp);
        out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
        if (!out) throw LoadError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot read checkpoint " + path.string());
    Reader r(std::vector<char>{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
    if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw LoadError(path.string() + " is not a checkpoint");
    const auto version = r.u32();
    if (version != kCheckpointVersion) throw LoadError("checkpoint version " + std::to_string(version) + " is not supported");
    Checkpoint c;
    try {
        c.config = RunConfig::from_text(r.bytes(r.u64()));
    } catch (const ConfigError& e) {
        throw LoadError(std::string("checkpoint config: ") + e.what());
    }
    c.step = r.u64();
    c.optimizer_steps = r.u64();
    const auto count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        ParamRecord p;
        p.name = r.bytes(r.u32());
        const auto rank = r.u64();
        if (rank > 8) throw LoadError("checkpoint: implausible rank for " + p.name);
        for (std::uint64_t d = 0; d < rank; ++d) p.shape.push_back(r.u64());
        const auto n = shape_numel(p.shape);
        p.values = r.f64s(n);
        p.m = r.f64s(n);
        p.v = r.f64s(n);
        c.params.push_back(std::move(p));
    }
    if (!r.done()) throw LoadError("checkpoint: trailing bytes");
    return c;
}

void restore_parameters(const Checkpoint& ckpt, const NamedTensors& params) {
    if (params.size() != ckpt.params.size()) {
        throw LoadError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                        std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& rec = ckpt.params[i];
        Tensor t = params[i].second;
        if (rec.name != params[i].first || rec.shape != t.shape()) {
            throw LoadError("checkpoint parameter " + rec.name + " " + shape_str(rec.shape) + " does not match " +
                            params[i].first + " " + shape_str(t.shape()));
        }
        std::copy(rec.values.begin(), rec.values.end(), t.data_mut().begin());
    }
}

void restore_optimizer(const Checkpoint& ckpt, AdamW& opt) {
    restore_parameters(ckpt, opt.params());
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        opt.first_moments()[i] = ckpt.params[i].m;
        opt.second_moments()[i] = ckpt.params[i].v;
    }
    opt.set_steps_taken(ckpt.optimizer_steps);
}

}  // namespace avseg
