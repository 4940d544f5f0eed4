#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace lpfa {

/// bfloat16 bit pattern: 1 sign, 8 exponent, 7 fraction bits.
struct B16 {
  std::uint16_t bits = 0;

  static constexpr B16 from_bits(std::uint16_t b) { return B16{b}; }
  friend constexpr bool operator==(B16 a, B16 b) { return a.bits == b.bits; }
  friend constexpr bool operator!=(B16 a, B16 b) { return a.bits != b.bits; }
};

constexpr std::uint16_t kB16QuietNan = 0x7FC0;
constexpr std::uint16_t kB16PosInf = 0x7F80;
constexpr std::uint16_t kB16NegInf = 0xFF80;

/// Exact real value of the pattern (subnormals included; NaN/Inf propagate).
double decode_b16(B16 b);

/// Nearest BF16 value, round-to-nearest ties-to-even, single rounding from
/// F64 (all bits below the rounding bit participate as sticky).
B16 encode_b16(double x);

bool b16_is_nan(B16 b);
bool b16_is_finite(B16 b);

/// BF16 unit in the last place at the magnitude of x.
double ulp_b16(double x);

/// One observed rounding step in a low-precision accumulation.
struct RoundingEvent {
  std::size_t position = 0;  // token index
  double exact = 0.0;        // F64 value of the pre-rounding sum
  B16 rounded{};             // BF16 result
  double error = 0.0;        // decode(rounded) - exact
  bool rounded_up = false;   // |rounded| > |exact|, signs agreeing
  bool overflow_shift = false;  // significand overflow forced a right shift
};

struct AddResult {
  B16 value{};
  RoundingEvent event{};
};

/// Four-step BF16 addition: align exponents, add significands, normalize,
/// round ties-even. Operates on the raw bit patterns.
AddResult add_b16_pair(B16 a, B16 b);

/// Accumulation semantics for low-precision dot products. FinalRound keeps
/// the running sum in F32 and rounds once at the end; StepRound rounds the
/// running sum to BF16 after every addition.
enum class SumMode { FinalRound, StepRound };

struct DotResult {
  B16 value{};
  double exact = 0.0;  // F64 view of the F32 accumulation, pre-BF16-rounding
};

/// Dot product in F32 with the final result rounded to BF16. Each product is
/// exact in F32 (8-bit x 8-bit significands); accumulation runs in ascending
/// index order.
DotResult dot_lp(std::span<const B16> p, std::span<const B16> v,
                 SumMode mode = SumMode::FinalRound);

/// Dot product entirely in F32 (products and ascending accumulation).
float dot_hp(std::span<const float> p, std::span<const float> v);

/// Rounding event of every prefix: event t has exact = F64 of the
/// F32-accumulated prefix, rounded = encode_b16 of it, and error = the
/// cumulative low-precision error at that token position.
std::vector<RoundingEvent> prefix_error_trace(std::span<const B16> p,
                                              std::span<const B16> v,
                                              SumMode mode = SumMode::FinalRound);

/// One row of the 2-bit addition table: adding the last two fraction bits of
/// two significands whose sum overflows; the shifted-out bit decides rounding.
struct RoundingBitEntry {
  std::uint8_t lhs = 0;        // 2-bit operand
  std::uint8_t rhs = 0;        // 2-bit operand
  std::uint8_t kept = 0;       // (lhs + rhs) >> 1, the bits that survive the shift
  bool rounding_bit = false;   // (lhs + rhs) & 1, the shifted-out bit
};

/// All 10 unordered additions of two 2-bit numbers with their rounding bits.
std::array<RoundingBitEntry, 10> rounding_bit_table();

/// Host binary32 conformance self-test over golden vectors (RNE additions,
/// exact small products, subnormal handling). Call once at startup.
bool verify_f32_conformance();

}  // namespace lpfa
