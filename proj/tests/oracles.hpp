#pragma once

// Reference implementations used by the unit tests and the acceptance
// binary. They share no code with the library versions they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace wavbert::oracle {

// Collapse a frame path: merge runs, then drop blanks (id 0).
inline std::vector<int> collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int id : path) {
    if (id != prev && id != 0) out.push_back(id);
    prev = id;
  }
  return out;
}

// -log of the total probability of all vocab^T frame paths whose collapse
// equals `target`. `probs` is row-major (T, vocab). Exponential; keep
// vocab^T small.
inline double ctc_nll_brute_force(const std::vector<double>& probs, std::size_t t_len, std::size_t vocab,
                                  const std::vector<int>& target) {
  std::vector<int> path(t_len, 0);
  double total = 0.0;
  while (true) {
    if (collapse(path) == target) {
      double p = 1.0;
      for (std::size_t t = 0; t < t_len; ++t) p *= probs[t * vocab + static_cast<std::size_t>(path[t])];
      total += p;
    }
    std::size_t t = 0;
    while (t < t_len && ++path[t] == static_cast<int>(vocab)) path[t++] = 0;
    if (t == t_len) break;
  }
  return -std::log(total);
}

// Memoized top-down Levenshtein recursion.
inline std::size_t edit_distance_recursive(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> memo((a.size() + 1) * (b.size() + 1), npos);
  std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == 0) return j;
    if (j == 0) return i;
    std::size_t& slot = memo[i * (b.size() + 1) + j];
    if (slot != npos) return slot;
    const std::size_t sub = d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1);
    slot = std::min({sub, d(i - 1, j) + 1, d(i, j - 1) + 1});
    return slot;
  };
  return d(a.size(), b.size());
}

// Mean -log softmax(logits[i])[target[i]] over selected rows, computed
// directly from the definition.
inline double mean_nll(const std::vector<double>& logits, std::size_t vocab, const std::vector<int>& target,
                       const std::vector<bool>& selected) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!selected[i]) continue;
    double z = 0.0;
    for (std::size_t k = 0; k < vocab; ++k) z += std::exp(logits[i * vocab + k]);
    total += std::log(z) - logits[i * vocab + static_cast<std::size_t>(target[i])];
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace wavbert::oracle
