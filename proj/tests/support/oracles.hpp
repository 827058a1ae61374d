#pragma once

// Independent reference implementations used only by tests. These are kept
// deliberately naive (exhaustive loops, direct formulas) and share no code
// with the library paths they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Exhaustive semi-hard triplet loss over (B,E) embeddings. Mining rule:
// for every ordered same-class (anchor, positive) pair scan all negatives;
// prefer the smallest distance inside the open band (d_ap, d_ap+margin),
// otherwise the smallest distance overall; ties keep the lowest index.
inline double triplet_semihard(const std::vector<double>& emb, int64_t b, int64_t e,
                               const std::vector<int>& classes, double margin) {
  auto dist = [&](int64_t i, int64_t j) {
    double acc = 0.0;
    for (int64_t d = 0; d < e; ++d) {
      const double diff = emb[static_cast<size_t>(i * e + d)] -
                          emb[static_cast<size_t>(j * e + d)];
      acc += diff * diff;
    }
    return acc;
  };
  double total = 0.0;
  int64_t pairs = 0;
  for (int64_t a = 0; a < b; ++a) {
    for (int64_t p = 0; p < b; ++p) {
      if (a == p || classes[static_cast<size_t>(a)] != classes[static_cast<size_t>(p)]) {
        continue;
      }
      const double d_ap = dist(a, p);
      double best_band = 0.0, best_all = 0.0;
      int64_t pick_band = -1, pick_all = -1;
      for (int64_t n = 0; n < b; ++n) {
        if (classes[static_cast<size_t>(n)] == classes[static_cast<size_t>(a)]) continue;
        const double d_an = dist(a, n);
        if (pick_all < 0 || d_an < best_all) {
          best_all = d_an;
          pick_all = n;
        }
        if (d_an > d_ap && d_an < d_ap + margin && (pick_band < 0 || d_an < best_band)) {
          best_band = d_an;
          pick_band = n;
        }
      }
      const double d_an = pick_band >= 0 ? best_band : best_all;
      total += std::max(0.0, (d_ap - d_an) + margin);
      pairs += 1;
    }
  }
  return total / static_cast<double>(pairs);
}

// Mean softmax cross-entropy of an NxN score matrix with diagonal targets,
// evaluated with plain exponentials (no log-sum-exp shift).
inline double diag_softmax_xent(const std::vector<double>& scores, int64_t n) {
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) denom += std::exp(scores[static_cast<size_t>(i * n + j)]);
    total += -std::log(std::exp(scores[static_cast<size_t>(i * n + i)]) / denom);
  }
  return total / static_cast<double>(n);
}

// Direct evaluation of the video-level contrastive objective
//   -(1/N) sum_i log( exp(s_ii) / ((1/N) sum_j exp(s_ij)) ).
inline double infonce_direct(const std::vector<double>& scores, int64_t n) {
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) denom += std::exp(scores[static_cast<size_t>(i * n + j)]);
    denom /= static_cast<double>(n);
    total += std::log(std::exp(scores[static_cast<size_t>(i * n + i)]) / denom);
  }
  return -total / static_cast<double>(n);
}

struct PmkCounts {
  int64_t anchors_used = 0;
  int64_t anchors_excluded = 0;
  int64_t anchor_correct = 0;
  int64_t pmk_correct = 0;
};

// Brute-force enumeration of anchor and neighborhood correctness.
inline PmkCounts pmk_enumerate(const std::vector<std::vector<int>>& pred,
                               const std::vector<std::vector<int>>& truth,
                               const std::vector<std::vector<int64_t>>& anchors, int64_t k) {
  PmkCounts c;
  for (size_t v = 0; v < pred.size(); ++v) {
    const int64_t t = static_cast<int64_t>(pred[v].size());
    for (int64_t a : anchors[v]) {
      if (a - k < 0 || a + k >= t) {
        c.anchors_excluded += 1;
        continue;
      }
      c.anchors_used += 1;
      if (pred[v][static_cast<size_t>(a)] == truth[v][static_cast<size_t>(a)]) {
        c.anchor_correct += 1;
        bool all = true;
        for (int64_t j = a - k; j <= a + k; ++j) {
          if (pred[v][static_cast<size_t>(j)] != truth[v][static_cast<size_t>(j)]) {
            all = false;
            break;
          }
        }
        if (all) c.pmk_correct += 1;
      }
    }
  }
  return c;
}

}  // namespace oracle
