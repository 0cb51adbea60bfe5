#pragma once

#include <vector>

#include "dgseg/autodiff.hpp"
#include "dgseg/config.hpp"
#include "dgseg/segnet.hpp"
#include "dgseg/types.hpp"

namespace dgseg::losses {

enum class SampleTag { original, augmented };

// Positive/negative index sets per anchor. Original anchors pair with the
// other originals and repel every augmented sample; augmented anchors keep
// only themselves as positive and repel everything else.
struct BatchPartition {
  int b = 0;
  std::vector<SampleTag> tags;
  std::vector<std::vector<int>> positives;
  std::vector<std::vector<int>> negatives;
};

BatchPartition partition_batch(const std::vector<SampleTag>& tags, int b);

struct LossWeights {
  Scalar lambda_reg = 1.0;
  Scalar lambda_contra = 1.0;
  Scalar lambda_cons = 10.0;
  Scalar lambda_mc = 1.0;
  Scalar lambda_cc = 1.0;
  Scalar lambda_bce = 5.0;
  Scalar lambda_dice = 5.0;
  Scalar tau = 0.5;
  Scalar tau_vl = 0.07;

  static LossWeights from_config(const Config& cfg);
  void validate() const;
};

// InfoNCE-style loss over domain embeddings, one column per sample,
// cosine similarity at temperature tau.
ag::Var contrastive_loss(const ag::Var& pi, const BatchPartition& part,
                         Scalar tau);

// Symmetric BCE between two mask logit sets of the same shape.
ag::Var mask_consistency(const ag::Var& a, const ag::Var& b);

// Mean per-query JSD between class posteriors (columns are queries).
ag::Var class_consistency(const ag::Var& a, const ag::Var& b);

// Sum over decoder blocks of lambda_mc * mask + lambda_cc * class terms
// between the traces of an original/augmented pair.
ag::Var consistency_loss(const segnet::DecoderTrace& ta,
                         const segnet::DecoderTrace& tb,
                         const LossWeights& w);

// Per-block cross-entropy + weighted BCE + dice under fixed query-to-class
// matching, summed over every block. Pixels labeled kIgnoreLabel drop out of
// the mask terms.
ag::Var segmentation_loss(const segnet::DecoderTrace& trace,
                          const LabelMap& gt, const LossWeights& w);

// Cross-entropy of cosine scores between current and template text features
// against the identity assignment.
ag::Var reg_language(const ag::Var& text, const Mat& template_text);

// Majority label per patch cell; ignore-only cells map to -1. Ties pick the
// smallest class id.
std::vector<int> downsample_labels_majority(const LabelMap& gt, int patch);

// Per-patch cross-entropy of text/projected-patch cosine scores at
// temperature tau_vl against the majority-downsampled labels.
ag::Var reg_vision_language(segnet::SegModel& model,
                            const segnet::ImageFeatures& feats,
                            const ag::Var& text, const LabelMap& gt,
                            Scalar tau_vl);

// L2 distance between the trainable class token and its frozen counterpart.
ag::Var reg_vision(const ag::Var& cls, const Mat& frozen_cls);

// Any null component contributes zero.
struct LossComponents {
  ag::Var seg;
  ag::Var reg_language;
  ag::Var reg_vision_language;
  ag::Var reg_vision;
  ag::Var contra;
  ag::Var cons;
};

ag::Var total_loss(const LossComponents& c, const LossWeights& w);

}  // namespace dgseg::losses
