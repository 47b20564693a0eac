#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cwm/errors.hpp"
#include "cwm/rng.hpp"

namespace cwm::mask {

// Cosine schedule gamma(u) = cos(pi*u/2); governs both training mask
// ratios and inference unmask budgets.
double schedule_gamma(double u);

struct MaskState {
  int n_tokens = 0;
  std::vector<uint8_t> masked;  // one flag per position
  int step = 0;
  int total_steps = 0;
  double ratio = 0.0;  // the drawn gamma(u); masked count is ceil(ratio * n)

  int masked_count() const {
    return static_cast<int>(std::count(masked.begin(), masked.end(), uint8_t{1}));
  }
};

// Draws u ~ U[0,1), masks ceil(gamma(u) * n) uniformly chosen positions
// (always at least one).
MaskState sample_training_mask(int n_tokens, Rng& rng);

struct UnmaskPlan {
  std::vector<int> masked_counts;  // tokens still masked after each step; last entry 0
};

// m_t = min(floor(gamma(t/T) * n), n - t) for t < T, m_T = 0. The second
// term guarantees at least one token is revealed per step.
UnmaskPlan plan_unmask_counts(int n_tokens, int total_steps);

constexpr int kMaskedToken = -1;

// Per-position categorical with explicit probabilities.
class DenseCategorical {
 public:
  DenseCategorical() = default;
  explicit DenseCategorical(std::vector<double> probs) : probs_(std::move(probs)) {}

  int sample(Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs_.size(); ++i) {
      acc += probs_[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs_.size()) - 1;
  }

  double prob(int token) const {
    if (token < 0 || token >= static_cast<int>(probs_.size()))
      throw RangeError("DenseCategorical: token out of range");
    return probs_[token];
  }

  bool valid(double tol) const {
    double sum = 0.0;
    for (double p : probs_) {
      if (p < 0.0 || !std::isfinite(p)) return false;
      sum += p;
    }
    return std::abs(sum - 1.0) <= tol;
  }

  const std::vector<double>& probs() const { return probs_; }

 private:
  std::vector<double> probs_;
};

// Sample-and-freeze state machine for one sequence. Each advance() samples
// every still-masked position, keeps the scheduled count re-masked
// (lowest confidence first) and freezes the rest; frozen tokens are never
// revisited. Confidence is the probability assigned to the sampled token.
// The batched world-model rollout drives several controllers in lockstep.
class UnmaskController {
 public:
  UnmaskController(int n_tokens, int total_steps)
      : plan_(plan_unmask_counts(n_tokens, total_steps)),
        tokens_(static_cast<size_t>(n_tokens), kMaskedToken),
        masked_(static_cast<size_t>(n_tokens), 1) {}

  bool done() const { return step_ >= static_cast<int>(plan_.masked_counts.size()); }
  int total_steps() const { return static_cast<int>(plan_.masked_counts.size()); }
  const std::vector<int>& tokens() const { return tokens_; }
  const std::vector<uint8_t>& masked() const { return masked_; }

  // Dist must provide sample(Rng&), prob(int) and valid(double); one entry
  // per position, only masked positions are consulted.
  template <class Dist>
  void advance(const std::vector<Dist>& dists, Rng& rng, double dist_tol = 1e-4) {
    if (done()) throw StateError("UnmaskController: already complete");
    const int n = static_cast<int>(tokens_.size());
    if (static_cast<int>(dists.size()) != n)
      throw ContractViolation("iterative unmasking: predictor returned " +
                              std::to_string(dists.size()) + " distributions for " +
                              std::to_string(n) + " positions");
    struct Draw {
      double confidence;
      int pos;
      int token;
    };
    std::vector<Draw> draws;
    for (int pos = 0; pos < n; ++pos) {
      if (!masked_[static_cast<size_t>(pos)]) continue;
      if (!dists[static_cast<size_t>(pos)].valid(dist_tol))
        throw ContractViolation("iterative unmasking: predictor output at position " +
                                std::to_string(pos) + " is not a probability distribution");
      const int token = dists[static_cast<size_t>(pos)].sample(rng);
      draws.push_back({dists[static_cast<size_t>(pos)].prob(token), pos, token});
    }
    // Ties resolve by position for determinism.
    std::sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) {
      if (a.confidence != b.confidence) return a.confidence > b.confidence;
      return a.pos < b.pos;
    });
    const int keep_masked = plan_.masked_counts[static_cast<size_t>(step_)];
    const int to_freeze = static_cast<int>(draws.size()) - keep_masked;
    for (int i = 0; i < to_freeze; ++i) {
      tokens_[static_cast<size_t>(draws[static_cast<size_t>(i)].pos)] =
          draws[static_cast<size_t>(i)].token;
      masked_[static_cast<size_t>(draws[static_cast<size_t>(i)].pos)] = 0;
    }
    ++step_;
  }

 private:
  UnmaskPlan plan_;
  std::vector<int> tokens_;
  std::vector<uint8_t> masked_;
  int step_ = 0;
};

// Confidence-based iterative unmasking (MaskGIT-style) over a fully masked
// sequence. The predictor receives the current partial sequence
// (kMaskedToken at masked positions) and the mask flags, and must return
// one distribution per position.
template <class Dist, class Predictor>
std::vector<int> iterative_unmask(Predictor&& predictor, int n_tokens, int total_steps,
                                  Rng& rng, double dist_tol = 1e-4) {
  UnmaskController ctl(n_tokens, total_steps);
  while (!ctl.done()) {
    const std::vector<Dist> dists = predictor(ctl.tokens(), ctl.masked());
    ctl.advance(dists, rng, dist_tol);
  }
  return ctl.tokens();
}

}  // namespace cwm::mask
