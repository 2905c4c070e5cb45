#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "lrgl/rng.hpp"

using namespace lrgl;

TEST_CASE("philox known answers") {
    using A4 = std::array<std::uint32_t, 4>;
    using A2 = std::array<std::uint32_t, 2>;
    CHECK(philox4x32(A4{0, 0, 0, 0}, A2{0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
    CHECK(philox4x32(A4{~0u, ~0u, ~0u, ~0u}, A2{~0u, ~0u}) == A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
    CHECK(philox4x32(A4{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, A2{0xa4093822, 0x299f31d0}) ==
          A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("streams are reproducible and address-separated") {
    const std::uint64_t key = replica_key(42, 0);
    CounterStream a(key, 7, 3, 1), b(key, 7, 3, 1);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());

    std::set<std::uint32_t> first;
    for (std::uint64_t step : {0ull, 1ull, 1ull << 32})
        for (std::uint32_t stream : {0u, 1u, 1000u})
            for (std::uint32_t sub : {1u, 2u, 3u, CounterStream::init_code}) {
                CounterStream s(key, step, stream, sub);
                first.insert(s.next_u32());
            }
    CHECK(first.size() == 36);
    CHECK(replica_key(42, 0) != replica_key(42, 1));
    CHECK(replica_key(42, 0) != replica_key(43, 0));
}

TEST_CASE("uniforms stay inside the open unit interval") {
    CounterStream s(replica_key(1, 0), 0, 0);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    constexpr int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = s.uniform();
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    CHECK(lo > 0.0);
    CHECK(hi < 1.0);
    CHECK(std::abs(sum / n - 0.5) < 5.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST_CASE("ziggurat normals match the Gaussian law") {
    constexpr int n = 2000000;
    CounterStream s(replica_key(2024, 3), 11, 5);
    double m1 = 0, m2 = 0, m4 = 0;
    const std::vector<double> cuts{-2.5, -1.0, -0.3, 0.0, 0.7, 1.5, 3.0};
    std::vector<double> below(cuts.size(), 0.0);
    double tail = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = s.normal();
        m1 += z;
        m2 += z * z;
        m4 += z * z * z * z;
        for (std::size_t c = 0; c < cuts.size(); ++c) below[c] += z < cuts[c];
        tail += std::abs(z) > 3.5;
    }
    m1 /= n;
    m2 /= n;
    m4 /= n;
    CHECK(std::abs(m1) < 5.0 / std::sqrt(n));
    CHECK(std::abs(m2 - 1.0) < 5.0 * std::sqrt(2.0 / n));
    CHECK(std::abs(m4 - 3.0) < 5.0 * std::sqrt(96.0 / n));
    for (std::size_t c = 0; c < cuts.size(); ++c) {
        const double p = 0.5 * std::erfc(-cuts[c] / std::sqrt(2.0));
        CHECK(std::abs(below[c] / n - p) < 5.0 * std::sqrt(p * (1 - p) / n));
    }
    const double pt = std::erfc(3.5 / std::sqrt(2.0));
    CHECK(std::abs(tail / n - pt) < 5.0 * std::sqrt(pt / n));
}
