#include "lrgl/rng.hpp"

#include <cmath>

namespace lrgl {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> c, std::array<std::uint32_t, 2> k) {
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
        k[0] += kWeyl0;
        k[1] += kWeyl1;
    }
    return c;
}

std::uint64_t replica_key(std::uint64_t seed, std::uint64_t replica) {
    return splitmix(splitmix(seed) ^ (replica * 0xD6E8FEB86659FD93ull + 0x632BE59BD9B4E019ull));
}

CounterStream::CounterStream(std::uint64_t key, std::uint64_t step, std::uint32_t stream, std::uint32_t sub)
    : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)},
      ctr_{0u, stream, static_cast<std::uint32_t>(step),
           static_cast<std::uint32_t>((step >> 32) & 0xFFu) | (sub << 8)} {}

void CounterStream::refill() {
    buf_ = philox4x32(ctr_, key_);
    ++ctr_[0];
    pos_ = 0;
}

namespace detail {

const ZigguratTables& ziggurat_tables() {
    static const ZigguratTables tables = [] {
        // Marsaglia–Tsang 128-layer tables scaled for a 25-bit signed magnitude.
        ZigguratTables t{};
        const double m1 = 16777216.0;  // 2^24
        double dn = 3.442619855899, tn = dn;
        const double vn = 9.91256303526217e-3;
        const double q = vn / std::exp(-0.5 * dn * dn);
        t.kn[0] = static_cast<std::int32_t>((dn / q) * m1);
        t.kn[1] = 0;
        t.wn[0] = q / m1;
        t.wn[127] = dn / m1;
        t.fn[0] = 1.0;
        t.fn[127] = std::exp(-0.5 * dn * dn);
        for (int i = 126; i >= 1; --i) {
            dn = std::sqrt(-2.0 * std::log(vn / dn + std::exp(-0.5 * dn * dn)));
            t.kn[i + 1] = static_cast<std::int32_t>((dn / tn) * m1);
            tn = dn;
            t.fn[i] = std::exp(-0.5 * dn * dn);
            t.wn[i] = dn / m1;
        }
        return t;
    }();
    return tables;
}

} // namespace detail

double CounterStream::normal_tail(std::int32_t hz, std::uint32_t iz) {
    const detail::ZigguratTables& t = detail::ziggurat_tables();
    constexpr double r = 3.442620;
    for (;;) {
        const double x = hz * t.wn[iz];
        if (iz == 0) {
            double xx, yy;
            do {
                xx = -std::log(uniform()) * (1.0 / r);
                yy = -std::log(uniform());
            } while (yy + yy < xx * xx);
            return hz > 0 ? r + xx : -r - xx;
        }
        if (t.fn[iz] + uniform() * (t.fn[iz - 1] - t.fn[iz]) < std::exp(-0.5 * x * x)) return x;
        const std::uint32_t w = next_u32();
        iz = w & 127u;
        hz = static_cast<std::int32_t>(w) >> 7;
        if ((hz < 0 ? -hz : hz) < t.kn[iz]) return hz * t.wn[iz];
    }
}

} // namespace lrgl
