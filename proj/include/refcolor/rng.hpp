#ifndef REFCOLOR_RNG_HPP
#define REFCOLOR_RNG_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace refcolor {

// Counter-based generator: value = finalize(key + GOLDEN * counter).
// A stream is fully described by (seed, name, counter), so checkpointing a
// stream is just saving its counter.
inline uint64_t splitmix_fin(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= (uint8_t)c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class RngStream {
public:
    RngStream() = default;
    RngStream(uint64_t seed, std::string_view name)
        : key_(splitmix_fin(seed ^ splitmix_fin(fnv1a(name)))) {}

    uint64_t next_u64() {
        counter_++;
        return splitmix_fin(key_ + 0x9E3779B97F4A7C15ULL * counter_);
    }

    // uniform on (0,1]
    double next_unit() { return ((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller, one value per two draws; no cached spare so the state is
    // exactly the counter.
    double next_gaussian() {
        double u1 = next_unit();
        double u2 = next_unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    uint32_t next_below(uint32_t n) {
        if (n == 0)
            throw std::invalid_argument("next_below(0)");
        return (uint32_t)(next_u64() % n);
    }

    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

private:
    uint64_t key_     = 0;
    uint64_t counter_ = 0;
};

// Named streams hanging off one master seed. Stream counters are the only
// mutable state, serialized into checkpoints by the pipeline.
class RngSet {
public:
    RngSet() = default;
    explicit RngSet(uint64_t seed) : seed_(seed) {}

    uint64_t seed() const { return seed_; }

    RngStream& stream(const std::string& name) {
        auto it = streams_.find(name);
        if (it == streams_.end())
            it = streams_.emplace(name, RngStream(seed_, name)).first;
        return it->second;
    }

    const std::map<std::string, RngStream>& streams() const { return streams_; }

    void restore_stream(const std::string& name, uint64_t counter) {
        stream(name).set_counter(counter);
    }

private:
    uint64_t seed_ = 0;
    std::map<std::string, RngStream> streams_;
};

}  // namespace refcolor

#endif
