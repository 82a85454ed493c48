#pragma once

// Brute-force reference for ITC-then-ITM candidate ordering. Enumerates every
// permutation and keeps the one satisfying the pairwise ordering rules, with
// no sorting routine involved.

#include <algorithm>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace testing {

inline std::vector<std::size_t> brute_force_order(std::span<const double> itc, std::span<const double> itm,
                                                  std::size_t k) {
  const std::size_t n = itc.size();
  auto itc_before = [&](std::size_t a, std::size_t b) { return itc[a] > itc[b] || (itc[a] == itc[b] && a < b); };
  auto itc_rank = [&](std::size_t a) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < n; ++b) r += itc_before(b, a);
    return r;
  };
  k = std::min(k, n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> found;
  std::size_t hits = 0;
  do {
    bool ok = true;
    for (std::size_t p = 0; p < n && ok; ++p)
      for (std::size_t q = p + 1; q < n && ok; ++q) {
        const std::size_t a = perm[p], b = perm[q];
        if (q < k)
          ok = itm[a] > itm[b] || (itm[a] == itm[b] && itc_rank(a) < itc_rank(b));
        else
          ok = itc_rank(a) < itc_rank(b);
      }
    if (ok) {
      found = perm;
      ++hits;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (hits != 1) throw std::logic_error("oracle: ordering is not unique");
  return found;
}

}  // namespace testing
