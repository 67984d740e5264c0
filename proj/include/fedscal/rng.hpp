#ifndef FEDSCAL_RNG_HPP
#define FEDSCAL_RNG_HPP

#include <cstdint>
#include <initializer_list>

namespace fedscal {

// Deterministic counter-style RNG. Two streams constructed with the same
// (seed, stream ids) produce bitwise-identical draws; distinct stream ids
// give independent streams. One stream per logical actor, never shared.
//
// Core generator is splitmix64; gaussians come from Box-Muller on explicit
// uniform draws so the sequence does not depend on libstdc++ internals.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id);
    RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> stream_ids);

    std::uint64_t next_u64();

    // uniform in [0, 1)
    double next_double();

    // uniform integer in [0, n), n > 0
    std::uint64_t next_below(std::uint64_t n);

    // standard normal
    double next_gaussian();

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedscal

#endif
