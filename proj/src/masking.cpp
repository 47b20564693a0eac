#include "cwm/masking.hpp"

namespace cwm::mask {

double schedule_gamma(double u) {
  if (u < 0.0 || u > 1.0)
    throw RangeError("schedule_gamma: u = " + std::to_string(u) + " outside [0, 1]");
  return std::cos(1.5707963267948966 * u);
}

MaskState sample_training_mask(int n_tokens, Rng& rng) {
  if (n_tokens < 1) throw ValidationError("sample_training_mask: n_tokens must be >= 1");
  const double ratio = schedule_gamma(rng.uniform());  // in (0, 1]
  const int n_masked =
      std::min(n_tokens, static_cast<int>(std::ceil(ratio * static_cast<double>(n_tokens))));

  // Partial Fisher-Yates over position indices.
  std::vector<int> idx(static_cast<size_t>(n_tokens));
  for (int i = 0; i < n_tokens; ++i) idx[static_cast<size_t>(i)] = i;
  MaskState st;
  st.n_tokens = n_tokens;
  st.ratio = ratio;
  st.masked.assign(static_cast<size_t>(n_tokens), 0);
  for (int i = 0; i < n_masked; ++i) {
    const int j = i + rng.uniform_int(n_tokens - i);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    st.masked[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  }
  st.step = 0;
  st.total_steps = 1;
  return st;
}

UnmaskPlan plan_unmask_counts(int n_tokens, int total_steps) {
  if (n_tokens < 1) throw ValidationError("plan_unmask_counts: n_tokens must be >= 1");
  if (total_steps < 1 || total_steps > n_tokens)
    throw ConfigError("plan_unmask_counts: total_steps must be in [1, n_tokens], got " +
                      std::to_string(total_steps) + " for n_tokens = " + std::to_string(n_tokens));
  UnmaskPlan plan;
  plan.masked_counts.reserve(static_cast<size_t>(total_steps));
  for (int t = 1; t < total_steps; ++t) {
    const double g = schedule_gamma(static_cast<double>(t) / static_cast<double>(total_steps));
    const int by_schedule = static_cast<int>(std::floor(g * static_cast<double>(n_tokens)));
    plan.masked_counts.push_back(std::min(by_schedule, n_tokens - t));
  }
  plan.masked_counts.push_back(0);
  return plan;
}

}  // namespace cwm::mask
