#include "doctest.h"

#include "lpfa/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace lpfa;

namespace {

// Reference encoder built from a sorted table of every finite nonnegative
// pattern plus a 2^128 sentinel for the overflow tie. Nearest value wins,
// ties go to the even pattern index (pattern LSB is the fraction LSB).
struct NearestOracle {
  std::vector<double> vals;

  NearestOracle() {
    vals.resize(0x7F81);
    for (std::uint32_t i = 0; i < 0x7F80; ++i) {
      vals[i] = decode_b16(B16::from_bits(static_cast<std::uint16_t>(i)));
    }
    vals[0x7F80] = std::ldexp(1.0, 128);
  }

  std::uint16_t encode(double x) const {
    if (std::isnan(x)) return kB16QuietNan;
    const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
    const double ax = std::fabs(x);
    if (std::isinf(x)) return sign | kB16PosInf;
    auto it = std::lower_bound(vals.begin(), vals.end(), ax);
    std::size_t hi = static_cast<std::size_t>(it - vals.begin());
    if (hi == 0) return sign;
    if (hi == vals.size()) hi = vals.size() - 1;
    const std::size_t lo = hi - 1;
    const double dlo = ax - vals[lo];
    const double dhi = vals[hi] - ax;
    std::size_t pick;
    if (dlo < dhi) {
      pick = lo;
    } else if (dhi < dlo) {
      pick = hi;
    } else {
      pick = (lo % 2 == 0) ? lo : hi;
    }
    return sign | static_cast<std::uint16_t>(pick);
  }
};

int exp_field(std::uint16_t bits) { return (bits >> 7) & 0xFF; }

std::uint16_t random_finite(std::mt19937_64& rng) {
  for (;;) {
    auto b = static_cast<std::uint16_t>(rng());
    if ((b & 0x7F80) != 0x7F80) return b;
  }
}

std::uint32_t f32_bits(float f) { return std::bit_cast<std::uint32_t>(f); }

}  // namespace

TEST_CASE("decode matches the field formula for all patterns") {
  for (std::uint32_t i = 0; i < 0x10000; ++i) {
    const auto b = B16::from_bits(static_cast<std::uint16_t>(i));
    const int s = (i >> 15) ? -1 : 1;
    const int ef = exp_field(b.bits);
    const int frac = b.bits & 0x7F;
    const double got = decode_b16(b);
    if (ef == 0xFF) {
      if (frac == 0) {
        CHECK(std::isinf(got));
        CHECK((got > 0) == (s > 0));
      } else {
        CHECK(std::isnan(got));
      }
      continue;
    }
    double want;
    if (ef == 0) {
      want = s * std::ldexp(frac / 128.0, -126);
    } else {
      want = s * std::ldexp(1.0 + frac / 128.0, ef - 127);
    }
    CHECK(got == want);
    if (got == 0.0) CHECK(std::signbit(got) == (s < 0));
  }
}

TEST_CASE("encode round-trips every pattern and canonicalizes NaN") {
  for (std::uint32_t i = 0; i < 0x10000; ++i) {
    const auto b = B16::from_bits(static_cast<std::uint16_t>(i));
    const B16 back = encode_b16(decode_b16(b));
    if (b16_is_nan(b)) {
      CHECK(back.bits == kB16QuietNan);
    } else {
      CHECK(back.bits == b.bits);
    }
  }
}

TEST_CASE("encode matches the nearest-even oracle") {
  NearestOracle oracle;

  SUBCASE("every adjacent midpoint ties to the even pattern") {
    for (std::uint32_t i = 0; i < 0x7F80; ++i) {
      const double mid = 0.5 * (oracle.vals[i] + oracle.vals[i + 1]);
      CHECK(encode_b16(mid).bits == oracle.encode(mid));
      CHECK(encode_b16(-mid).bits == oracle.encode(-mid));
      // A midpoint rounds to whichever neighbor has an even pattern.
      CHECK((encode_b16(mid).bits & 1) == 0);
    }
  }

  SUBCASE("random doubles across the exponent range") {
    std::mt19937_64 rng(0x5eed001);
    std::uniform_real_distribution<double> mant(1.0, 2.0);
    for (int t = 0; t < 200000; ++t) {
      const int e = static_cast<int>(rng() % 271) - 140;
      double x = std::ldexp(mant(rng), e);
      if (rng() & 1) x = -x;
      CAPTURE(x);
      CHECK(encode_b16(x).bits == oracle.encode(x));
    }
  }

  SUBCASE("overflow and underflow boundaries") {
    const double top_tie = std::ldexp(511.0, 119);  // 255.5 * 2^120
    CHECK(encode_b16(top_tie).bits == kB16PosInf);
    CHECK(encode_b16(-top_tie).bits == kB16NegInf);
    CHECK(encode_b16(std::nextafter(top_tie, 0.0)).bits == 0x7F7F);
    CHECK(encode_b16(std::ldexp(1.0, 128)).bits == kB16PosInf);

    const double bottom_tie = std::ldexp(1.0, -134);
    CHECK(encode_b16(bottom_tie).bits == 0x0000);
    CHECK(encode_b16(-bottom_tie).bits == 0x8000);
    CHECK(encode_b16(std::nextafter(bottom_tie, 1.0)).bits == 0x0001);
    CHECK(encode_b16(std::ldexp(1.0, -200)).bits == 0x0000);

    CHECK(encode_b16(std::numeric_limits<double>::quiet_NaN()).bits ==
          kB16QuietNan);
    CHECK(encode_b16(std::numeric_limits<double>::infinity()).bits ==
          kB16PosInf);
    CHECK(encode_b16(-std::numeric_limits<double>::infinity()).bits ==
          kB16NegInf);
    CHECK(encode_b16(0.0).bits == 0x0000);
    CHECK(encode_b16(-0.0).bits == 0x8000);
  }
}

TEST_CASE("rounding error never exceeds half an ulp") {
  std::mt19937_64 rng(0x5eed002);
  std::uniform_real_distribution<double> mant(1.0, 2.0);
  for (int t = 0; t < 100000; ++t) {
    const int e = static_cast<int>(rng() % 260) - 133;
    double x = std::ldexp(mant(rng), e);
    if (rng() & 1) x = -x;
    const B16 r = encode_b16(x);
    if (!b16_is_finite(r)) continue;
    CHECK(std::fabs(decode_b16(r) - x) <= 0.5 * ulp_b16(x));
  }
}

TEST_CASE("addition matches the oracle when the exact sum fits in F64") {
  NearestOracle oracle;
  std::mt19937_64 rng(0x5eed003);
  int tested = 0;
  while (tested < 300000) {
    const auto a = B16::from_bits(random_finite(rng));
    const auto b = B16::from_bits(random_finite(rng));
    const int ea = std::max(exp_field(a.bits), 1);
    const int eb = std::max(exp_field(b.bits), 1);
    if (std::abs(ea - eb) > 45) continue;
    ++tested;
    const double exact = decode_b16(a) + decode_b16(b);
    const AddResult r = add_b16_pair(a, b);
    const AddResult rswap = add_b16_pair(b, a);
    CAPTURE(a.bits);
    CAPTURE(b.bits);
    CHECK(r.value.bits == oracle.encode(exact));
    CHECK(rswap.value.bits == r.value.bits);
    CHECK(r.event.exact == exact);
    CHECK(r.event.error == decode_b16(r.value) - exact);
  }
}

TEST_CASE("same-exponent same-sign additions always shift right") {
  NearestOracle oracle;
  for (std::uint32_t fa = 0; fa < 128; ++fa) {
    for (std::uint32_t fb = 0; fb < 128; ++fb) {
      const auto a = B16::from_bits(static_cast<std::uint16_t>(0x8000 | (137 << 7) | fa));
      const auto b = B16::from_bits(static_cast<std::uint16_t>(0x8000 | (137 << 7) | fb));
      const AddResult r = add_b16_pair(a, b);
      CHECK(r.event.overflow_shift);
      CHECK(r.value.bits == oracle.encode(decode_b16(a) + decode_b16(b)));
      // Dropped significand LSB becomes the rounding bit with empty sticky,
      // so an odd significand sum must land on an even fraction.
      const std::uint32_t sig_sum = (0x80 | fa) + (0x80 | fb);
      if (sig_sum & 1) CHECK((r.value.bits & 1) == 0);
    }
  }
}

TEST_CASE("far-apart addends leave the larger operand unchanged") {
  std::mt19937_64 rng(0x5eed004);
  for (int t = 0; t < 20000; ++t) {
    const auto big = B16::from_bits(random_finite(rng));
    const auto small = B16::from_bits(random_finite(rng));
    const int ebig = std::max(exp_field(big.bits), 1);
    const int esmall = std::max(exp_field(small.bits), 1);
    if (ebig - esmall < 12 || decode_b16(big) == 0.0) continue;
    const AddResult r = add_b16_pair(big, small);
    CHECK(r.value.bits == big.bits);
  }
}

TEST_CASE("two-operand worked example rounds the tie to even") {
  const auto a = encode_b16(-2.40625);
  const auto b = encode_b16(-2.296875);
  CHECK(a.bits == 0xC01A);
  CHECK(b.bits == 0xC013);
  const AddResult r = add_b16_pair(a, b);
  CHECK(r.value.bits == 0xC096);
  CHECK(decode_b16(r.value) == -4.6875);
  CHECK(r.event.overflow_shift);
  CHECK(r.event.exact == -4.703125);
  CHECK(r.event.error == 0.015625);
  CHECK_FALSE(r.event.rounded_up);
}

TEST_CASE("three-term chain reproduces the sticky-forced round-up") {
  const B16 p[] = {encode_b16(1.0), encode_b16(0.859375), encode_b16(1.0)};
  const B16 v[] = {encode_b16(-2.40625), encode_b16(-0.001007080078125),
                   encode_b16(-2.296875)};

  const auto trace = prefix_error_trace(p, v);
  REQUIRE(trace.size() == 3);

  // Middle product is exact in F32 and lands in the accumulator's sticky
  // region once the third term arrives.
  CHECK(f32_bits(static_cast<float>(trace[1].exact)) ==
        0b1'10000000'00110100000111000101110u);
  CHECK(trace[1].exact == -2.4071154594421387);

  CHECK(trace[2].exact == -4.703990459442139);
  CHECK(f32_bits(static_cast<float>(trace[2].exact)) ==
        f32_bits(-4.703990459442139f));
  CHECK(trace[2].rounded.bits == 0b1'10000001'0010111u);
  CHECK(decode_b16(trace[2].rounded) == -4.71875);
  CHECK(trace[2].error == -0.014759540557861328);
  CHECK(trace[2].rounded_up);
  CHECK(trace[2].overflow_shift);

  const DotResult dot = dot_lp(p, v);
  CHECK(dot.value.bits == 0xC097);
  CHECK(dot.exact == -4.703990459442139);
}

TEST_CASE("fixture chain reproduces its recorded result") {
  std::ifstream in(std::string(LPFA_FIXTURE_DIR) + "/sticky_chain.txt");
  REQUIRE(in.good());
  std::vector<B16> p, v;
  std::uint16_t dot_bits = 0;
  double err = 0.0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "p" || key == "v") {
      std::string hex;
      while (ss >> hex) {
        const auto bits = static_cast<std::uint16_t>(std::stoul(hex, nullptr, 16));
        (key == "p" ? p : v).push_back(B16::from_bits(bits));
      }
    } else if (key == "dot") {
      std::string hex;
      ss >> hex;
      dot_bits = static_cast<std::uint16_t>(std::stoul(hex, nullptr, 16));
    } else if (key == "err") {
      ss >> err;
    }
  }
  REQUIRE(p.size() == v.size());
  REQUIRE(!p.empty());

  const DotResult dot = dot_lp(p, v);
  CHECK(dot.value.bits == dot_bits);
  const auto trace = prefix_error_trace(p, v);
  CHECK(trace.back().error == err);
}

TEST_CASE("rounding bit table lists all ten unordered 2-bit sums") {
  const auto table = rounding_bit_table();
  int idx = 0;
  for (std::uint8_t a = 0; a < 4; ++a) {
    for (std::uint8_t b = a; b < 4; ++b) {
      const auto& e = table[idx++];
      CHECK(e.lhs == a);
      CHECK(e.rhs == b);
      CHECK(e.kept == ((a + b) >> 1));
      CHECK(e.rounding_bit == static_cast<bool>((a + b) & 1));
    }
  }
  CHECK(idx == 10);
  // Spot rows quoted in the writeup: 1+2 keeps 1 and rounds, 3+3 keeps 3.
  CHECK(table[6].kept == 2);  // 1+3
  CHECK(table[6].rounding_bit == false);
  CHECK(table[9].kept == 3);  // 3+3
  CHECK(table[9].rounding_bit == false);
  CHECK(table[5].kept == 1);  // 1+2
  CHECK(table[5].rounding_bit == true);
}

TEST_CASE("step rounding loses what final rounding keeps") {
  const B16 p[] = {encode_b16(1.0), encode_b16(1.0), encode_b16(1.0)};
  const B16 v[] = {encode_b16(256.0), encode_b16(1.0), encode_b16(1.0)};
  const DotResult fin = dot_lp(p, v, SumMode::FinalRound);
  const DotResult step = dot_lp(p, v, SumMode::StepRound);
  CHECK(decode_b16(fin.value) == 258.0);
  CHECK(decode_b16(step.value) == 256.0);
}

TEST_CASE("ulp spot values") {
  CHECK(ulp_b16(1.0) == 0x1p-7);
  CHECK(ulp_b16(-1.5) == 0x1p-7);
  CHECK(ulp_b16(4.7) == 0.03125);
  CHECK(ulp_b16(0.0) == 0x1p-133);
  CHECK(ulp_b16(std::ldexp(1.0, -130)) == 0x1p-133);
  CHECK(ulp_b16(std::ldexp(1.0, 127)) == 0x1p120);
}

TEST_CASE("host binary32 arithmetic conforms") {
  CHECK(verify_f32_conformance());
}
