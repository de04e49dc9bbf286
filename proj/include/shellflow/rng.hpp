#pragma once

// Counter-based random numbers: Philox4x32-10 (Salmon et al., SC'11).
// Every draw is a pure function of (key, counter), so streams can be
// consumed in any order and by any number of threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace shellflow {

class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr Counter generate(Counter ctr, Key key) noexcept {
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += kWeyl0;
                key[1] += kWeyl1;
            }
            ctr = single_round(ctr, key);
        }
        return ctr;
    }

    static constexpr Key key_from_seed(std::uint64_t seed) noexcept {
        return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static constexpr Counter single_round(const Counter& c, const Key& k) noexcept {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
};

/// Maps a 32-bit word to (0, 1].
inline double uniform_open_closed(std::uint32_t w) noexcept {
    return (static_cast<double>(w) + 1.0) * 0x1p-32;
}

/// Box-Muller pair from two words, each component N(0,1).
inline std::array<double, 2> box_muller(std::uint32_t w0, std::uint32_t w1) noexcept {
    const double radius = std::sqrt(-2.0 * std::log(uniform_open_closed(w0)));
    const double angle = 2.0 * std::numbers::pi * uniform_open_closed(w1);
    return {radius * std::cos(angle), radius * std::sin(angle)};
}

/// Layer tables of the 128-layer ziggurat (Marsaglia & Tsang, 2000) at
/// 24-bit coordinate resolution.
struct ZigguratTables {
    static constexpr double r = 3.442619855899;  ///< start of the tail
    std::array<std::uint32_t, 128> kn{};
    std::array<double, 128> wn{};
    std::array<double, 128> fn{};

    ZigguratTables() noexcept {
        const double m1 = 0x1p24;
        const double vn = 9.91256303526217e-3;
        double dn = r;
        double tn = dn;
        const double q = vn / std::exp(-0.5 * dn * dn);
        kn[0] = static_cast<std::uint32_t>((dn / q) * m1);
        kn[1] = 0;
        wn[0] = q / m1;
        wn[127] = dn / m1;
        fn[0] = 1.0;
        fn[127] = std::exp(-0.5 * dn * dn);
        for (int i = 126; i >= 1; --i) {
            dn = std::sqrt(-2.0 * std::log(vn / dn + std::exp(-0.5 * dn * dn)));
            kn[static_cast<std::size_t>(i) + 1] = static_cast<std::uint32_t>((dn / tn) * m1);
            tn = dn;
            fn[static_cast<std::size_t>(i)] = std::exp(-0.5 * dn * dn);
            wn[static_cast<std::size_t>(i)] = dn / m1;
        }
    }

    static const ZigguratTables& get() noexcept {
        static const ZigguratTables tables;
        return tables;
    }
};

/// Exact N(0,1) draw from the word w. Bits 0-6 pick the layer and bits 7-31
/// give a signed coordinate, so layer and position come from disjoint bits.
/// The rare rejections (about 1.2%) take further words from more().
template <typename More>
double ziggurat_normal(std::uint32_t w, More&& more) {
    const ZigguratTables& t = ZigguratTables::get();
    for (;;) {
        const std::uint32_t iz = w & 127u;
        const std::int32_t hz = static_cast<std::int32_t>(w) >> 7;
        const double x = hz * t.wn[iz];
        if (static_cast<std::uint32_t>(hz < 0 ? -hz : hz) < t.kn[iz]) return x;
        if (iz == 0) {
            double xt = 0.0;
            double y = 0.0;
            do {
                xt = -std::log(uniform_open_closed(more())) / ZigguratTables::r;
                y = -std::log(uniform_open_closed(more()));
            } while (y + y < xt * xt);
            return hz > 0 ? ZigguratTables::r + xt : -ZigguratTables::r - xt;
        }
        const double u = uniform_open_closed(more());
        if (t.fn[iz] + u * (t.fn[iz - 1] - t.fn[iz]) < std::exp(-0.5 * x * x)) return x;
        w = more();
    }
}

/// Stream of standard normals for utility sampling (random starts, random
/// directions, random chains); not used for the Wiener increments.
class NormalStream {
public:
    NormalStream(std::uint64_t seed, std::uint32_t stream) noexcept
        : key_(Philox4x32::key_from_seed(seed)), stream_(stream) {}

    double normal() {
        if (cached_) {
            cached_ = false;
            return cache_;
        }
        const auto w = next_words();
        const auto pair = box_muller(w[0], w[1]);
        cache_ = pair[1];
        cached_ = true;
        return pair[0];
    }

    double uniform() { return uniform_open_closed(next_words()[0]); }

private:
    Philox4x32::Counter next_words() {
        const Philox4x32::Counter ctr{static_cast<std::uint32_t>(counter_),
                                      static_cast<std::uint32_t>(counter_ >> 32), 0xA5A5A5A5u,
                                      stream_};
        ++counter_;
        return Philox4x32::generate(ctr, key_);
    }

    Philox4x32::Key key_;
    std::uint32_t stream_;
    std::uint64_t counter_ = 0;
    double cache_ = 0.0;
    bool cached_ = false;
};

}  // namespace shellflow
