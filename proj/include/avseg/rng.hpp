#pragma once

#include <array>
#include <cstdint>

#include "avseg/tensor.hpp"

namespace avseg {

// xoshiro256** seeded through splitmix64. The algorithm is fixed so a seed
// reproduces the same stream on every platform. Floating-point draws use only
// the top 53 bits; normals use Box-Muller without caching.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    // Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n);
    double normal(double mean = 0.0, double stddev = 1.0);
    bool bernoulli(double p);

    std::uint64_t seed() const { return seed_; }
    std::array<std::uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

    Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false);
    Tensor normal_tensor(Shape shape, double mean, double stddev, bool requires_grad = false);

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> s_;
};

// Stateless seed derivation for independent sub-streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace avseg
