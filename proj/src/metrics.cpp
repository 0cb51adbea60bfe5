#include "dgseg/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dgseg::metrics {

ConfusionMatrix::ConfusionMatrix(int num_classes) {
  if (num_classes < 1)
    throw std::invalid_argument("ConfusionMatrix: num_classes must be >= 1");
  counts_.setZero(num_classes, num_classes);
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw std::invalid_argument("accumulate_confusion: shape mismatch");
  const int k = num_classes();
  for (Index y = 0; y < gt.rows(); ++y)
    for (Index x = 0; x < gt.cols(); ++x) {
      const int g = gt(y, x);
      if (g == kIgnoreLabel) continue;
      const int p = pred(y, x);
      if (g < 0 || g >= k || p < 0 || p >= k)
        throw std::invalid_argument(
            "accumulate_confusion: invalid class id (gt=" + std::to_string(g) +
            ", pred=" + std::to_string(p) + ", K=" + std::to_string(k) + ")");
      counts_(g, p) += 1;
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes() != num_classes())
    throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
  counts_ += other.counts_;
}

IouReport iou_from_confusion(const ConfusionMatrix& cm) {
  const int k = cm.num_classes();
  IouReport rep;
  rep.iou.assign(static_cast<std::size_t>(k), 0.0);
  rep.defined.assign(static_cast<std::size_t>(k), false);
  Scalar sum = 0.0;
  int n_defined = 0;
  for (int c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t inter = cm.at(c, c);
    const std::int64_t uni = row + col - inter;
    if (uni == 0) continue;
    rep.defined[static_cast<std::size_t>(c)] = true;
    rep.iou[static_cast<std::size_t>(c)] =
        static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
    sum += rep.iou[static_cast<std::size_t>(c)];
    ++n_defined;
  }
  if (n_defined == 0)
    throw std::runtime_error("iou_from_confusion: all classes undefined");
  rep.miou = sum / static_cast<Scalar>(n_defined);
  return rep;
}

PRCurve pr_curve_and_ap(const std::vector<Scalar>& scores,
                        const std::vector<std::uint8_t>& gt) {
  if (scores.size() != gt.size())
    throw std::invalid_argument("pr_curve_and_ap: size mismatch");
  if (scores.empty())
    throw std::invalid_argument("pr_curve_and_ap: empty input");
  std::int64_t n_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0))
      throw std::invalid_argument("pr_curve_and_ap: score out of [0,1]");
    if (gt[i] > 1)
      throw std::invalid_argument("pr_curve_and_ap: gt mask must be 0/1");
    n_pos += gt[i];
  }
  PRCurve curve;
  if (n_pos == 0) return curve;
  curve.defined = true;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  // Sweep thresholds at unique score values, highest first.
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const Scalar thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (gt[order[i]] ? tp : fp)++;
      ++i;
    }
    PRPoint pt;
    pt.threshold = thr;
    pt.precision = static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fp);
    pt.recall = static_cast<Scalar>(tp) / static_cast<Scalar>(n_pos);
    curve.points.push_back(pt);
  }

  // All-points interpolation: integrate recall steps against the running
  // maximum of precision over the tail.
  std::vector<Scalar> p_interp(curve.points.size());
  Scalar run = 0.0;
  for (std::size_t j = curve.points.size(); j-- > 0;) {
    run = std::max(run, curve.points[j].precision);
    p_interp[j] = run;
  }
  Scalar ap = 0.0, prev_recall = 0.0;
  for (std::size_t j = 0; j < curve.points.size(); ++j) {
    ap += (curve.points[j].recall - prev_recall) * p_interp[j];
    prev_recall = curve.points[j].recall;
  }
  curve.ap = ap;
  return curve;
}

}  // namespace dgseg::metrics
