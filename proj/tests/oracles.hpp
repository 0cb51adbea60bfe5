#pragma once

// Independent scalar-loop reference implementations of every loss and metric.
// Everything here is written with plain loops and the textbook formulas so a
// bug in the production Eigen/graph code cannot hide in a shared helper.

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "dgseg/types.hpp"

namespace oracle {

using dgseg::Index;
using dgseg::Mat;
using dgseg::Scalar;

inline Scalar sigmoid(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::vector<Scalar> softmax(const std::vector<Scalar>& z) {
  Scalar mx = z[0];
  for (Scalar v : z) mx = std::max(mx, v);
  std::vector<Scalar> p(z.size());
  Scalar sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (Scalar& v : p) v /= sum;
  return p;
}

inline Scalar cosine(const std::vector<Scalar>& a,
                     const std::vector<Scalar>& b) {
  Scalar dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Prompt contrastive loss by direct evaluation: -(1/2B) sum_i log(
// sum_{j in P_i} e^{s_ij/tau} / sum_{j in P_i u N_i} e^{s_ij/tau} ),
// sim = cosine.
inline Scalar contrastive(const Mat& pi,
                          const std::vector<std::vector<int>>& positives,
                          const std::vector<std::vector<int>>& negatives,
                          Scalar tau) {
  const Index n = pi.cols();
  auto col = [&](int j) {
    std::vector<Scalar> v(static_cast<std::size_t>(pi.rows()));
    for (Index r = 0; r < pi.rows(); ++r)
      v[static_cast<std::size_t>(r)] = pi(r, j);
    return v;
  };
  Scalar total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const auto ai = col(static_cast<int>(i));
    Scalar num = 0.0, den = 0.0;
    for (int j : positives[static_cast<std::size_t>(i)]) {
      const Scalar e = std::exp(cosine(ai, col(j)) / tau);
      num += e;
      den += e;
    }
    for (int j : negatives[static_cast<std::size_t>(i)])
      den += std::exp(cosine(ai, col(j)) / tau);
    total += -std::log(num / den);
  }
  return total / static_cast<Scalar>(n);
}

// BCE with a soft target, computed from probabilities (no softplus trick).
inline Scalar bce_soft(const Mat& logits, const Mat& soft_targets) {
  Scalar total = 0.0;
  for (Index c = 0; c < logits.cols(); ++c)
    for (Index r = 0; r < logits.rows(); ++r) {
      const Scalar p = sigmoid(logits(r, c));
      const Scalar t = soft_targets(r, c);
      total += -t * std::log(p) - (1.0 - t) * std::log(1.0 - p);
    }
  return total / static_cast<Scalar>(logits.size());
}

inline Scalar mask_consistency(const Mat& a, const Mat& b) {
  Mat sa(a.rows(), a.cols()), sb(a.rows(), a.cols());
  for (Index c = 0; c < a.cols(); ++c)
    for (Index r = 0; r < a.rows(); ++r) {
      sa(r, c) = sigmoid(a(r, c));
      sb(r, c) = sigmoid(b(r, c));
    }
  return 0.5 * (bce_soft(a, sb) + bce_soft(b, sa));
}

inline Scalar bce_weighted(const Mat& logits, const Mat& targets,
                           const Mat& weights) {
  Scalar total = 0.0, wsum = 0.0;
  for (Index c = 0; c < logits.cols(); ++c)
    for (Index r = 0; r < logits.rows(); ++r) {
      const Scalar w = weights(r, c);
      if (w == 0.0) continue;
      const Scalar p = sigmoid(logits(r, c));
      const Scalar t = targets(r, c);
      total += w * (-t * std::log(p) - (1.0 - t) * std::log(1.0 - p));
      wsum += w;
    }
  return wsum > 0.0 ? total / wsum : 0.0;
}

// Per-row dice with additive smoothing, averaged over rows.
inline Scalar dice(const Mat& logits, const Mat& targets, const Mat& weights,
                   Scalar smooth = 1.0) {
  Scalar total = 0.0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Scalar inter = 0.0, psum = 0.0, tsum = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) {
      const Scalar w = weights(r, c);
      const Scalar p = sigmoid(logits(r, c)) * w;
      inter += p * targets(r, c);
      psum += p;
      tsum += targets(r, c) * w;
    }
    total += 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
  }
  return total / static_cast<Scalar>(logits.rows());
}

inline Scalar kl(const std::vector<Scalar>& p, const std::vector<Scalar>& q) {
  Scalar total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) total += p[i] * std::log(p[i] / q[i]);
  return total;
}

inline Scalar jsd(const std::vector<Scalar>& p, const std::vector<Scalar>& q) {
  std::vector<Scalar> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

// Mean over columns of JSD between the column softmaxes of a and b.
inline Scalar jsd_softmax_pair(const Mat& a, const Mat& b) {
  Scalar total = 0.0;
  for (Index c = 0; c < a.cols(); ++c) {
    std::vector<Scalar> za, zb;
    for (Index r = 0; r < a.rows(); ++r) {
      za.push_back(a(r, c));
      zb.push_back(b(r, c));
    }
    total += jsd(softmax(za), softmax(zb));
  }
  return total / static_cast<Scalar>(a.cols());
}

// Mean cross-entropy over the columns whose target is >= 0.
inline Scalar ce_cols(const Mat& logits, const std::vector<int>& targets) {
  Scalar total = 0.0;
  int valid = 0;
  for (Index c = 0; c < logits.cols(); ++c) {
    const int t = targets[static_cast<std::size_t>(c)];
    if (t < 0) continue;
    std::vector<Scalar> z;
    for (Index r = 0; r < logits.rows(); ++r) z.push_back(logits(r, c));
    total += -std::log(softmax(z)[static_cast<std::size_t>(t)]);
    ++valid;
  }
  return valid > 0 ? total / static_cast<Scalar>(valid) : 0.0;
}

inline Mat l2normalize_cols(const Mat& m) {
  Mat out = m;
  for (Index c = 0; c < m.cols(); ++c) {
    Scalar n = 0.0;
    for (Index r = 0; r < m.rows(); ++r) n += m(r, c) * m(r, c);
    n = std::sqrt(n);
    for (Index r = 0; r < m.rows(); ++r) out(r, c) = m(r, c) / n;
  }
  return out;
}

// Cross-entropy of normalized-cosine scores against the identity matching:
// text column k should score highest against template column k.
inline Scalar reg_language(const Mat& text, const Mat& template_text) {
  const Mat t = l2normalize_cols(text);
  const Mat t0 = l2normalize_cols(template_text);
  const Index k = text.cols();
  Mat scores(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) {
      Scalar dot = 0.0;
      for (Index r = 0; r < text.rows(); ++r) dot += t0(r, i) * t(r, j);
      scores(i, j) = dot;
    }
  std::vector<int> targets;
  for (Index j = 0; j < k; ++j) targets.push_back(static_cast<int>(j));
  return ce_cols(scores, targets);
}

// Projected-patch / text-feature alignment: v = W p + b per patch, cosine
// scores against every class feature, CE at temperature tau_vl against the
// majority-vote patch label (< 0 = ignore).
inline Scalar reg_vision_language(const Mat& vl_w, const Mat& vl_b,
                                  const Mat& patch, const Mat& text,
                                  const std::vector<int>& patch_labels,
                                  Scalar tau_vl) {
  const Index d = vl_w.rows();
  const Index p = patch.cols();
  Mat proj(d, p);
  for (Index j = 0; j < p; ++j)
    for (Index i = 0; i < d; ++i) {
      Scalar acc = vl_b(i, 0);
      for (Index r = 0; r < vl_w.cols(); ++r) acc += vl_w(i, r) * patch(r, j);
      proj(i, j) = acc;
    }
  const Mat v = l2normalize_cols(proj);
  const Mat t = l2normalize_cols(text);
  Mat scores(text.cols(), p);
  for (Index j = 0; j < p; ++j)
    for (Index k = 0; k < text.cols(); ++k) {
      Scalar dot = 0.0;
      for (Index r = 0; r < d; ++r) dot += t(r, k) * v(r, j);
      scores(k, j) = dot / tau_vl;
    }
  return ce_cols(scores, patch_labels);
}

inline Scalar l2_distance(const Mat& a, const Mat& b) {
  Scalar total = 0.0;
  for (Index c = 0; c < a.cols(); ++c)
    for (Index r = 0; r < a.rows(); ++r) {
      const Scalar d = a(r, c) - b(r, c);
      total += d * d;
    }
  return std::sqrt(total);
}

// ---- metrics ----

// IoU per class from raw label vectors; returns mean over classes whose
// union is nonzero, and reports how many were defined.
inline Scalar miou(const std::vector<int>& gt, const std::vector<int>& pred,
                   int k, int* defined_out = nullptr) {
  Scalar total = 0.0;
  int defined = 0;
  for (int c = 0; c < k; ++c) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == 255) continue;
      const bool g = gt[i] == c, p = pred[i] == c;
      if (g && p) ++inter;
      if (g || p) ++uni;
    }
    if (uni > 0) {
      total += static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
      ++defined;
    }
  }
  if (defined_out) *defined_out = defined;
  if (defined == 0) throw std::invalid_argument("miou oracle: no defined class");
  return total / static_cast<Scalar>(defined);
}

// Average precision by explicit enumeration: one operating point per unique
// score (threshold = score, prediction positive when score >= threshold),
// then all-points interpolation Sum (R_i - R_{i-1}) * max precision at
// recall >= R_i.
struct ApPoint {
  Scalar threshold, precision, recall;
};

inline std::vector<ApPoint> pr_points(const std::vector<Scalar>& scores,
                                      const std::vector<int>& gt) {
  std::set<Scalar, std::greater<Scalar>> uniq(scores.begin(), scores.end());
  long npos = 0;
  for (int g : gt) npos += g;
  std::vector<ApPoint> pts;
  for (Scalar thr : uniq) {
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= thr) {
        if (gt[i] == 1)
          ++tp;
        else
          ++fp;
      }
    }
    ApPoint pt;
    pt.threshold = thr;
    pt.precision = (tp + fp) > 0
                       ? static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fp)
                       : 1.0;
    pt.recall = static_cast<Scalar>(tp) / static_cast<Scalar>(npos);
    pts.push_back(pt);
  }
  return pts;
}

inline Scalar ap(const std::vector<Scalar>& scores, const std::vector<int>& gt) {
  long npos = 0;
  for (int g : gt) npos += g;
  if (npos == 0) throw std::invalid_argument("ap oracle: no positives");
  const auto pts = pr_points(scores, gt);
  Scalar total = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    Scalar pmax = 0.0;
    for (std::size_t j = i; j < pts.size(); ++j)
      pmax = std::max(pmax, pts[j].precision);
    total += (pts[i].recall - prev_recall) * pmax;
    prev_recall = pts[i].recall;
  }
  return total;
}

}  // namespace oracle
