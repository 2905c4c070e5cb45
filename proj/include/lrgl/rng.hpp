#pragma once

#include <array>
#include <cstdint>

namespace lrgl {

// Philox4x32-10 block function (Salmon et al., SC'11).
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

// Mixes a seed and replica index into a 64-bit Philox key.
std::uint64_t replica_key(std::uint64_t seed, std::uint64_t replica);

// Reproducible stream addressed by (key, step, stream id, sub-step code).
// Different addresses never share counter blocks.
class CounterStream {
public:
    static constexpr std::uint32_t init_code = 0xFFFFFFu;

    CounterStream(std::uint64_t key, std::uint64_t step, std::uint32_t stream, std::uint32_t sub = 1);

    std::uint32_t next_u32() {
        if (pos_ == 4) refill();
        return buf_[pos_++];
    }
    // Uniform on the open interval (0,1).
    double uniform() { return (static_cast<double>(next_u32()) + 0.5) * 0x1p-32; }
    double normal();

private:
    void refill();
    double normal_tail(std::int32_t hz, std::uint32_t iz);

    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> ctr_;
    std::array<std::uint32_t, 4> buf_{};
    unsigned pos_ = 4;
};

namespace detail {
struct ZigguratTables {
    std::array<std::int32_t, 128> kn;
    std::array<double, 128> wn;
    std::array<double, 128> fn;
};
const ZigguratTables& ziggurat_tables();
} // namespace detail

inline double CounterStream::normal() {
    static const detail::ZigguratTables& t = detail::ziggurat_tables();
    const std::uint32_t w = next_u32();
    const std::uint32_t iz = w & 127u;
    // Layer index from the low bits, signed 25-bit magnitude from the rest.
    const std::int32_t hz = static_cast<std::int32_t>(w) >> 7;
    if ((hz < 0 ? -hz : hz) < t.kn[iz]) return hz * t.wn[iz];
    return normal_tail(hz, iz);
}

} // namespace lrgl
