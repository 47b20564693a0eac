#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cwm/errors.hpp"

namespace cwm::fsq {

// Finite scalar quantization over a mixed-radix grid. Each channel c is
// rounded to one of levels[c] equally spaced values on [-1, 1],
// v_k = -1 + 2k/(L-1). Channel 0 is the least significant radix digit.
struct FsqLevels {
  std::vector<int> levels{8, 8, 8, 5, 5, 5};

  int channels() const { return static_cast<int>(levels.size()); }
  uint64_t codebook_size() const;
  void validate() const;  // every entry >= 2, nonempty
};

using CodeIndex = uint32_t;

// Smooth odd squashing applied to unbounded activations before quantize;
// keeps straight-through gradients defined.
inline double bound(double x) { return std::tanh(x); }
inline float bound(float x) { return std::tanh(x); }

// Per-channel level value for digit k of an L-level channel.
double level_value(int digit, int level_count);

// Nearest-level rounding of a bounded latent (one entry per channel).
// Midpoint ties break toward the lower level index. Values outside
// [-1, 1] saturate at the extreme levels.
CodeIndex quantize(std::span<const float> latent, const FsqLevels& levels);
CodeIndex quantize(std::span<const double> latent, const FsqLevels& levels);

std::vector<int> index_to_digits(CodeIndex index, const FsqLevels& levels);
CodeIndex digits_to_index(std::span<const int> digits, const FsqLevels& levels);

// Exact inverse of digit composition: per-channel level values.
std::vector<double> code_to_vector(CodeIndex code, const FsqLevels& levels);
void code_to_vector_f(CodeIndex code, const FsqLevels& levels, float* out);

// L1 distance between the level vectors of two codes.
double code_distance(CodeIndex a, CodeIndex b, const FsqLevels& levels);

struct BitsBudget {
  int tokens_per_frame = 0;
  double bits_per_token = 0.0;
  double bits_per_frame = 0.0;
  std::optional<double> action_entropy_bits;
};

BitsBudget bits_budget(const FsqLevels& levels, int tokens_per_frame);

}  // namespace cwm::fsq
