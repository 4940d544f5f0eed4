#include "lpfa/numerics.hpp"

#include <bit>
#include <climits>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace lpfa {

namespace {

constexpr int kFracBits = 7;
constexpr int kExpBias = 127;
constexpr int kMinExp = -126;   // smallest normal exponent
constexpr int kMaxExp = 127;
constexpr int kSubnormUlpExp = kMinExp - kFracBits;  // 2^-133

struct Unpacked {
  int sign = 0;       // 0 or 1
  int exp = 0;        // unbiased; value = (-1)^sign * sig * 2^(exp - 7)
  std::uint32_t sig = 0;  // 8-bit significand, implicit bit made explicit
};

Unpacked unpack(B16 b) {
  Unpacked u;
  u.sign = (b.bits >> 15) & 1;
  int ef = (b.bits >> kFracBits) & 0xFF;
  std::uint32_t frac = b.bits & 0x7F;
  if (ef == 0) {  // subnormal or zero: no hidden bit, exponent pinned
    u.exp = kMinExp;
    u.sig = frac;
  } else {
    u.exp = ef - kExpBias;
    u.sig = 0x80u | frac;
  }
  return u;
}

B16 pack(int sign, int exp, std::uint32_t sig) {
  // sig in [128, 255] for normals, [0, 127] with exp == kMinExp for subnormals
  std::uint16_t s = static_cast<std::uint16_t>(sign) << 15;
  if (sig == 0) return B16::from_bits(s);
  if (sig & 0x80u) {
    if (exp > kMaxExp) return B16::from_bits(s | kB16PosInf);
    return B16::from_bits(
        static_cast<std::uint16_t>(s | ((exp + kExpBias) << kFracBits) | (sig & 0x7F)));
  }
  return B16::from_bits(static_cast<std::uint16_t>(s | sig));  // subnormal
}

bool same_sign(double a, double b) { return std::signbit(a) == std::signbit(b); }

}  // namespace

double decode_b16(B16 b) {
  // Zero-extension into binary32 is exact for every pattern class.
  std::uint32_t wide = static_cast<std::uint32_t>(b.bits) << 16;
  return static_cast<double>(std::bit_cast<float>(wide));
}

bool b16_is_nan(B16 b) {
  return ((b.bits & 0x7F80) == 0x7F80) && (b.bits & 0x007F);
}

bool b16_is_finite(B16 b) { return (b.bits & 0x7F80) != 0x7F80; }

B16 encode_b16(double x) {
  const std::uint64_t u = std::bit_cast<std::uint64_t>(x);
  const std::uint16_t sign = static_cast<std::uint16_t>((u >> 48) & 0x8000);
  const int biased = static_cast<int>((u >> 52) & 0x7FF);
  const std::uint64_t frac = u & 0xFFFFFFFFFFFFFull;

  if (biased == 0x7FF) {
    if (frac != 0) return B16::from_bits(kB16QuietNan);
    return B16::from_bits(static_cast<std::uint16_t>(sign | kB16PosInf));
  }
  if (x == 0.0) return B16::from_bits(sign);

  // |x| = m * 2^e2 with m an integer significand.
  std::uint64_t m;
  int e2;
  int eb;  // floor(log2 |x|)
  if (biased > 0) {
    m = (1ull << 52) | frac;
    e2 = biased - 1023 - 52;
    eb = biased - 1023;
  } else {
    m = frac;
    e2 = -1022 - 52;
    eb = e2 + std::bit_width(m) - 1;
  }
  if (eb > kMaxExp) {
    return B16::from_bits(static_cast<std::uint16_t>(sign | kB16PosInf));
  }

  // ULP exponent of the target grid; shift m down to ulp units with
  // round and sticky taken from everything below.
  const int q = std::max(eb - kFracBits, kSubnormUlpExp);
  const int shift = q - e2;
  std::uint64_t kept;
  bool round_bit = false, sticky = false;
  if (shift <= 0) {
    kept = m << (-shift);
  } else if (shift > 63) {
    kept = 0;
    sticky = (m != 0);
  } else {
    kept = m >> shift;
    round_bit = (m >> (shift - 1)) & 1ull;
    sticky = (m & ((1ull << (shift - 1)) - 1)) != 0;
  }
  if (round_bit && (sticky || (kept & 1ull))) ++kept;

  int exp = q + kFracBits;  // exponent such that value = kept * 2^(exp-7)
  if (kept == 0x100) {      // rounding carried out of the 8-bit significand
    kept = 0x80;
    ++exp;
  }
  if (kept >= 0x80 && exp > kMaxExp) {
    return B16::from_bits(static_cast<std::uint16_t>(sign | kB16PosInf));
  }
  return pack(sign >> 15, exp, static_cast<std::uint32_t>(kept));
}

double ulp_b16(double x) {
  if (x == 0.0 || !std::isfinite(x)) return std::ldexp(1.0, kSubnormUlpExp);
  int eb = std::ilogb(std::fabs(x));
  if (eb < kMinExp) eb = kMinExp;
  if (eb > kMaxExp) eb = kMaxExp;
  return std::ldexp(1.0, eb - kFracBits);
}

AddResult add_b16_pair(B16 a, B16 b) {
  if (!b16_is_finite(a) || !b16_is_finite(b)) {
    throw std::invalid_argument("add_b16_pair: operands must be finite");
  }
  const double exact = decode_b16(a) + decode_b16(b);

  Unpacked ua = unpack(a), ub = unpack(b);
  if (ua.exp < ub.exp || (ua.exp == ub.exp && ua.sig < ub.sig)) std::swap(ua, ub);

  // Step 1, exponent alignment: 3 workspace bits (guard, round, sticky),
  // everything shifted past them ORs into sticky.
  std::uint32_t big = ua.sig << 3;
  std::uint32_t small = ub.sig << 3;
  const int diff = ua.exp - ub.exp;
  if (diff > 0) {
    if (diff >= 14) {
      small = (small != 0) ? 1u : 0u;
    } else {
      std::uint32_t lost = small & ((1u << diff) - 1);
      small = (small >> diff) | (lost ? 1u : 0u);
    }
  }

  // Step 2, significand addition.
  int sign = ua.sign;
  std::uint32_t sum;
  if (ua.sign == ub.sign) {
    sum = big + small;
  } else {
    sum = big - small;  // big >= small by the swap above
  }

  RoundingEvent ev;
  ev.exact = exact;
  if (sum == 0) {
    // Exact cancellation gives +0 under RNE; -0 only from two -0 inputs.
    const bool neg = ua.sign && ub.sign && big == 0;
    ev.rounded = B16::from_bits(neg ? 0x8000 : 0);
    ev.error = 0.0;
    return {ev.rounded, ev};
  }

  // Step 3, normalization. Workspace significand lives in [2^10, 2^11).
  int exp = ua.exp;
  if (sum >= (1u << 11)) {
    std::uint32_t lost = sum & 1u;
    sum = (sum >> 1) | lost;
    ++exp;
    ev.overflow_shift = true;
  }
  while (sum < (1u << 10) && exp > kMinExp) {
    sum <<= 1;
    --exp;
  }

  // Step 4, round to nearest, ties to even.
  std::uint32_t kept = sum >> 3;
  const bool round_bit = (sum >> 2) & 1u;
  const bool sticky = (sum & 3u) != 0;
  if (round_bit && (sticky || (kept & 1u))) ++kept;
  if (kept == 0x100) {
    kept = 0x80;
    ++exp;
  }

  ev.rounded = pack(sign, exp, kept);
  ev.error = decode_b16(ev.rounded) - exact;
  ev.rounded_up = exact != 0.0 && same_sign(decode_b16(ev.rounded), exact) &&
                  std::fabs(decode_b16(ev.rounded)) > std::fabs(exact);
  return {ev.rounded, ev};
}

namespace {

int f32_exponent(float x) {
  if (x == 0.0f || !std::isfinite(x)) return INT_MIN;
  return std::ilogb(x);
}

RoundingEvent make_event(std::size_t pos, double exact_acc, bool overflow) {
  RoundingEvent ev;
  ev.position = pos;
  ev.exact = exact_acc;
  ev.rounded = encode_b16(exact_acc);
  ev.error = decode_b16(ev.rounded) - exact_acc;
  ev.rounded_up = exact_acc != 0.0 &&
                  same_sign(decode_b16(ev.rounded), exact_acc) &&
                  std::fabs(decode_b16(ev.rounded)) > std::fabs(exact_acc);
  ev.overflow_shift = overflow;
  return ev;
}

}  // namespace

DotResult dot_lp(std::span<const B16> p, std::span<const B16> v, SumMode mode) {
  if (p.size() != v.size()) {
    throw std::invalid_argument("dot_lp: length mismatch");
  }
  if (p.empty()) throw std::invalid_argument("dot_lp: empty operands");
  float acc = 0.0f;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float prod = static_cast<float>(decode_b16(p[i])) *
                       static_cast<float>(decode_b16(v[i]));
    acc += prod;
    if (mode == SumMode::StepRound) {
      acc = static_cast<float>(decode_b16(encode_b16(static_cast<double>(acc))));
    }
  }
  return {encode_b16(static_cast<double>(acc)), static_cast<double>(acc)};
}

float dot_hp(std::span<const float> p, std::span<const float> v) {
  if (p.size() != v.size()) {
    throw std::invalid_argument("dot_hp: length mismatch");
  }
  float acc = 0.0f;
  for (std::size_t i = 0; i < p.size(); ++i) acc += p[i] * v[i];
  return acc;
}

std::vector<RoundingEvent> prefix_error_trace(std::span<const B16> p,
                                              std::span<const B16> v,
                                              SumMode mode) {
  if (p.size() != v.size()) {
    throw std::invalid_argument("prefix_error_trace: length mismatch");
  }
  std::vector<RoundingEvent> trace;
  trace.reserve(p.size());
  float acc = 0.0f;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float prod = static_cast<float>(decode_b16(p[i])) *
                       static_cast<float>(decode_b16(v[i]));
    const int e_before = std::max(f32_exponent(acc), f32_exponent(prod));
    acc += prod;
    if (mode == SumMode::StepRound) {
      acc = static_cast<float>(decode_b16(encode_b16(static_cast<double>(acc))));
    }
    const bool overflow = f32_exponent(acc) > e_before && e_before != INT_MIN;
    trace.push_back(make_event(i, static_cast<double>(acc), overflow));
  }
  return trace;
}

std::array<RoundingBitEntry, 10> rounding_bit_table() {
  std::array<RoundingBitEntry, 10> table{};
  std::size_t k = 0;
  for (std::uint8_t a = 0; a < 4; ++a) {
    for (std::uint8_t b = a; b < 4; ++b) {
      const std::uint8_t sum = a + b;
      table[k++] = {a, b, static_cast<std::uint8_t>(sum >> 1),
                    static_cast<bool>(sum & 1)};
    }
  }
  return table;
}

bool verify_f32_conformance() {
  auto bits = [](float f) { return std::bit_cast<std::uint32_t>(f); };

  // Tie with zero sticky rounds to the even significand.
  volatile float a = 1.0f;
  volatile float half_ulp = 0x1p-24f;
  if (bits(a + half_ulp) != bits(1.0f)) return false;
  volatile float odd = 1.0f + 0x1p-23f;
  if (bits(odd + half_ulp) != bits(1.0f + 0x1p-22f)) return false;

  // Small BF16xBF16 products are exact in binary32.
  volatile float pr = 0.859375f;
  volatile float vr = -0.001007080078125f;
  if (bits(pr * vr) != bits(-0.00086545944213867188f)) return false;

  // The residual-bearing accumulator chain used throughout the module.
  volatile float s0 = -2.40625f;
  volatile float s1 = s0 + (pr * vr);
  if (bits(s1) != bits(-2.4071154594421387f)) return false;
  volatile float s2 = s1 + -2.296875f;
  if (bits(s2) != bits(-4.703990459442139f)) return false;

  // Subnormal arithmetic is not flushed.
  volatile float tiny = 0x1p-149f;
  if (bits(tiny + tiny) != bits(0x1p-148f)) return false;

  return true;
}

}  // namespace lpfa
