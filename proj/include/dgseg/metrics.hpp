#pragma once

#include <cstdint>
#include <vector>

#include "dgseg/image.hpp"
#include "dgseg/types.hpp"

namespace dgseg::metrics {

// Rows index the ground-truth class, columns the predicted class. Ignored
// pixels are never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return static_cast<int>(counts_.rows()); }
  std::int64_t at(int gt, int pred) const { return counts_(gt, pred); }

  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  std::int64_t total() const { return counts_.sum(); }

 private:
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
};

struct IouReport {
  std::vector<Scalar> iou;      // valid only where defined[k]
  std::vector<bool> defined;    // false when the class union is zero
  Scalar miou = 0.0;            // mean over defined classes
};

IouReport iou_from_confusion(const ConfusionMatrix& cm);

struct PRPoint {
  Scalar threshold;
  Scalar precision;
  Scalar recall;
};

// defined == false when the mask has no positive pixels; points/ap are then
// meaningless.
struct PRCurve {
  std::vector<PRPoint> points;
  Scalar ap = 0.0;
  bool defined = false;
};

// scores in [0,1], gt entries 0/1, same length. One PR point per unique
// score threshold (descending); AP by all-points interpolation.
PRCurve pr_curve_and_ap(const std::vector<Scalar>& scores,
                        const std::vector<std::uint8_t>& gt);

}  // namespace dgseg::metrics
