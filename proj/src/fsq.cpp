#include "cwm/fsq.hpp"

#include <algorithm>
#include <string>

namespace cwm::fsq {

uint64_t FsqLevels::codebook_size() const {
  validate();
  uint64_t k = 1;
  for (int l : levels) k *= static_cast<uint64_t>(l);
  return k;
}

void FsqLevels::validate() const {
  if (levels.empty()) throw ValidationError("FsqLevels: empty level list");
  for (int l : levels)
    if (l < 2) throw ValidationError("FsqLevels: every level count must be >= 2");
}

double level_value(int digit, int level_count) {
  return -1.0 + 2.0 * static_cast<double>(digit) / static_cast<double>(level_count - 1);
}

namespace {

int nearest_digit(double x, int level_count) {
  // t is the fractional level coordinate; ceil(t - 0.5) is nearest with
  // midpoint ties resolved to the lower index.
  const double t = (x + 1.0) * static_cast<double>(level_count - 1) / 2.0;
  int k = static_cast<int>(std::ceil(t - 0.5));
  return std::clamp(k, 0, level_count - 1);
}

template <class S>
CodeIndex quantize_impl(std::span<const S> latent, const FsqLevels& levels) {
  levels.validate();
  if (static_cast<int>(latent.size()) != levels.channels())
    throw DimensionError("quantize: latent has " + std::to_string(latent.size()) +
                         " channels, levels expect " + std::to_string(levels.channels()));
  uint64_t index = 0;
  for (int c = levels.channels() - 1; c >= 0; --c) {
    const int d = nearest_digit(static_cast<double>(latent[c]), levels.levels[c]);
    index = index * static_cast<uint64_t>(levels.levels[c]) + static_cast<uint64_t>(d);
  }
  return static_cast<CodeIndex>(index);
}

}  // namespace

CodeIndex quantize(std::span<const float> latent, const FsqLevels& levels) {
  return quantize_impl(latent, levels);
}

CodeIndex quantize(std::span<const double> latent, const FsqLevels& levels) {
  return quantize_impl(latent, levels);
}

std::vector<int> index_to_digits(CodeIndex index, const FsqLevels& levels) {
  levels.validate();
  if (static_cast<uint64_t>(index) >= levels.codebook_size())
    throw RangeError("code index " + std::to_string(index) + " out of range for codebook of " +
                     std::to_string(levels.codebook_size()));
  std::vector<int> digits(levels.channels());
  uint64_t rem = index;
  for (int c = 0; c < levels.channels(); ++c) {
    const auto l = static_cast<uint64_t>(levels.levels[c]);
    digits[c] = static_cast<int>(rem % l);
    rem /= l;
  }
  return digits;
}

CodeIndex digits_to_index(std::span<const int> digits, const FsqLevels& levels) {
  levels.validate();
  if (static_cast<int>(digits.size()) != levels.channels())
    throw DimensionError("digits_to_index: digit count mismatch");
  uint64_t index = 0;
  for (int c = levels.channels() - 1; c >= 0; --c) {
    if (digits[c] < 0 || digits[c] >= levels.levels[c])
      throw RangeError("digit out of range on channel " + std::to_string(c));
    index = index * static_cast<uint64_t>(levels.levels[c]) + static_cast<uint64_t>(digits[c]);
  }
  return static_cast<CodeIndex>(index);
}

std::vector<double> code_to_vector(CodeIndex code, const FsqLevels& levels) {
  const auto digits = index_to_digits(code, levels);
  std::vector<double> v(digits.size());
  for (size_t c = 0; c < digits.size(); ++c)
    v[c] = level_value(digits[c], levels.levels[c]);
  return v;
}

void code_to_vector_f(CodeIndex code, const FsqLevels& levels, float* out) {
  const auto digits = index_to_digits(code, levels);
  for (size_t c = 0; c < digits.size(); ++c)
    out[c] = static_cast<float>(level_value(digits[c], levels.levels[c]));
}

double code_distance(CodeIndex a, CodeIndex b, const FsqLevels& levels) {
  const auto da = index_to_digits(a, levels);
  const auto db = index_to_digits(b, levels);
  double d = 0.0;
  for (size_t c = 0; c < da.size(); ++c)
    d += std::abs(level_value(da[c], levels.levels[c]) - level_value(db[c], levels.levels[c]));
  return d;
}

BitsBudget bits_budget(const FsqLevels& levels, int tokens_per_frame) {
  if (tokens_per_frame < 1) throw ValidationError("bits_budget: tokens_per_frame must be >= 1");
  BitsBudget b;
  b.tokens_per_frame = tokens_per_frame;
  b.bits_per_token = std::log2(static_cast<double>(levels.codebook_size()));
  b.bits_per_frame = b.bits_per_token * tokens_per_frame;
  return b;
}

}  // namespace cwm::fsq
