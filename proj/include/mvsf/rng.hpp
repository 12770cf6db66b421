#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

namespace mvsf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

namespace detail {

// SplitMix64 finalizer. Bijective on 64-bit words with full avalanche; used
// as the mixing primitive of the counter-based generator below.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

// Uniform in (0,1), 53-bit mantissa, never exactly 0 or 1.
inline double to_unit(std::uint64_t h) {
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
}

} // namespace detail

/// Purpose tag of a Brownian stream. Distinct tags give statistically
/// independent streams for the same particle.
enum class NoiseTag : std::uint64_t {
    W1 = 1,        // common noise of the coupled system (dim d1)
    W2 = 2,        // independent fast noise (dim d2)
    Wtilde = 3,    // extra independent noise of the limit equation (dim d1)
    FrozenW1 = 4,  // fresh noise for frozen-dynamics runs
    FrozenW2 = 5,
    AuxW1 = 6,     // auxiliary cloud inside the corrector solver
    AuxW2 = 7,
    InnerW1 = 8,   // inner replica paths of the corrector solver
    InnerW2 = 9,
    InitX = 10,    // initial-condition sampling
    InitY = 11,
    Probe = 12,    // validation probes
    Projection = 13 // sliced-distance directions
};

/// Counter-based Gaussian noise. Every (particle, tag) pair owns a stream,
/// every draw in a stream is addressed by an index, so any increment can be
/// recomputed from (master_seed, run_salt) alone. Re-running with the same
/// seed reproduces increments bit-for-bit regardless of worker count, and
/// two simulations sharing a plan consume identical W1 increments.
struct NoisePlan {
    std::uint64_t master_seed = 0;
    std::uint64_t run_salt = 0; // replica index or purpose-specific salt
    double dt = 1e-2;           // micro step of the consumer
    double sign = 1.0;          // -1 flips every draw (antithetic partner)

    NoisePlan with_salt(std::uint64_t salt) const {
        NoisePlan p = *this;
        p.run_salt = salt;
        return p;
    }
    NoisePlan with_dt(double new_dt) const {
        NoisePlan p = *this;
        p.dt = new_dt;
        return p;
    }
    NoisePlan antithetic() const {
        NoisePlan p = *this;
        p.sign = -p.sign;
        return p;
    }

    std::uint64_t stream_key(std::uint64_t particle, NoiseTag tag) const {
        std::uint64_t k = detail::mix64(master_seed ^ 0xa076'1d64'78bd'642full);
        k = detail::combine(k, run_salt);
        k = detail::combine(k, particle + 1);
        k = detail::combine(k, static_cast<std::uint64_t>(tag) * 0x100'0000'01b3ull);
        return k;
    }

    /// index-th standard normal of the stream (Box-Muller pair, random access).
    double gaussian(std::uint64_t particle, NoiseTag tag, std::uint64_t index) const {
        const std::uint64_t key = stream_key(particle, tag);
        const std::uint64_t pair = index >> 1;
        const double u1 = detail::to_unit(detail::combine(key, 2 * pair));
        const double u2 = detail::to_unit(detail::combine(key, 2 * pair + 1));
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        return sign * ((index & 1) ? r * std::sin(a) : r * std::cos(a));
    }

    /// dim consecutive normals starting at base index.
    Vec gaussian_vec(std::uint64_t particle, NoiseTag tag, std::uint64_t base,
                     int dim) const {
        Vec z(dim);
        for (int c = 0; c < dim; ++c)
            z[c] = gaussian(particle, tag, base + static_cast<std::uint64_t>(c));
        return z;
    }

    /// Brownian increment of step `step` for one particle: sqrt(dt) * N(0,I).
    Vec increment(std::uint64_t particle, NoiseTag tag, std::uint64_t step,
                  int dim) const {
        Vec z = gaussian_vec(particle, tag, step * static_cast<std::uint64_t>(dim), dim);
        return std::sqrt(dt) * z;
    }
};

/// Sequential view of one stream; hands out normals one at a time.
class RngStream {
public:
    RngStream(const NoisePlan& plan, std::uint64_t particle, NoiseTag tag)
        : plan_(plan), particle_(particle), tag_(tag) {}

    double normal() { return plan_.gaussian(particle_, tag_, next_++); }

    double uniform() {
        const std::uint64_t key = plan_.stream_key(particle_, tag_);
        return detail::to_unit(detail::combine(key ^ 0x5bf0'3635'dcd1'd0e5ull, next_++));
    }

private:
    NoisePlan plan_;
    std::uint64_t particle_;
    NoiseTag tag_;
    std::uint64_t next_ = 0;
};

} // namespace mvsf
