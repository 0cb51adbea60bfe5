#include "dgseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace dgseg::losses {

using ag::Var;

BatchPartition partition_batch(const std::vector<SampleTag>& tags, int b) {
  int n_orig = 0, n_aug = 0;
  for (const SampleTag t : tags)
    (t == SampleTag::original ? n_orig : n_aug)++;
  if (b < 2 || n_orig < 2)
    throw std::invalid_argument("contrastive loss requires at least 2 originals");
  if (n_orig != b || n_aug != b)
    throw std::invalid_argument(
        "partition_batch: expected " + std::to_string(b) + " originals and " +
        std::to_string(b) + " augmented, got " + std::to_string(n_orig) +
        " / " + std::to_string(n_aug));

  const int n = static_cast<int>(tags.size());
  BatchPartition part;
  part.b = b;
  part.tags = tags;
  part.positives.resize(tags.size());
  part.negatives.resize(tags.size());
  for (int i = 0; i < n; ++i) {
    auto& pos = part.positives[static_cast<std::size_t>(i)];
    auto& neg = part.negatives[static_cast<std::size_t>(i)];
    if (tags[static_cast<std::size_t>(i)] == SampleTag::original) {
      for (int j = 0; j < n; ++j) {
        if (tags[static_cast<std::size_t>(j)] == SampleTag::original) {
          if (j != i) pos.push_back(j);
        } else {
          neg.push_back(j);
        }
      }
    } else {
      pos.push_back(i);
      for (int j = 0; j < n; ++j)
        if (j != i) neg.push_back(j);
    }
  }
  return part;
}

LossWeights LossWeights::from_config(const Config& cfg) {
  LossWeights w;
  w.lambda_reg = cfg.get_real("loss.lambda_reg", w.lambda_reg);
  w.lambda_contra = cfg.get_real("loss.lambda_contra", w.lambda_contra);
  w.lambda_cons = cfg.get_real("loss.lambda_cons", w.lambda_cons);
  w.lambda_mc = cfg.get_real("loss.lambda_mc", w.lambda_mc);
  w.lambda_cc = cfg.get_real("loss.lambda_cc", w.lambda_cc);
  w.lambda_bce = cfg.get_real("loss.lambda_bce", w.lambda_bce);
  w.lambda_dice = cfg.get_real("loss.lambda_dice", w.lambda_dice);
  w.tau = cfg.get_real("loss.tau", w.tau);
  w.tau_vl = cfg.get_real("loss.tau_vl", w.tau_vl);
  w.validate();
  return w;
}

void LossWeights::validate() const {
  const auto check = [](Scalar v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw std::invalid_argument(std::string(name) +
                                  " must be positive and finite");
  };
  check(lambda_reg, "loss.lambda_reg");
  check(lambda_contra, "loss.lambda_contra");
  check(lambda_cons, "loss.lambda_cons");
  check(lambda_mc, "loss.lambda_mc");
  check(lambda_cc, "loss.lambda_cc");
  check(lambda_bce, "loss.lambda_bce");
  check(lambda_dice, "loss.lambda_dice");
  check(tau, "loss.tau");
  check(tau_vl, "loss.tau_vl");
}

ag::Var contrastive_loss(const ag::Var& pi, const BatchPartition& part,
                         Scalar tau) {
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw std::invalid_argument("contrastive_loss: tau must be > 0");
  const Index n = pi->value.cols();
  if (n != static_cast<Index>(part.tags.size()))
    throw std::invalid_argument(
        "contrastive_loss: pi has " + std::to_string(n) +
        " columns but the partition covers " +
        std::to_string(part.tags.size()) + " samples");

  const Var nrm = ag::l2normalize_cols(pi);
  const Var sims = ag::scale(ag::matmul(ag::transpose(nrm), nrm), 1.0 / tau);
  Mat mask_pos = Mat::Zero(n, n);
  Mat mask_all = Mat::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (const int j : part.positives[static_cast<std::size_t>(i)]) {
      mask_pos(j, i) = 1.0;
      mask_all(j, i) = 1.0;
    }
    for (const int j : part.negatives[static_cast<std::size_t>(i)])
      mask_all(j, i) = 1.0;
  }
  const Var num = ag::masked_lse_cols(sims, mask_pos);
  const Var den = ag::masked_lse_cols(sims, mask_all);
  return ag::scale(ag::sum(ag::sub(den, num)), 1.0 / static_cast<Scalar>(n));
}

ag::Var mask_consistency(const ag::Var& a, const ag::Var& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw std::invalid_argument("mask_consistency: shape mismatch");
  const Var ab = ag::bce_logits_soft(a, ag::sigmoid(b));
  const Var ba = ag::bce_logits_soft(b, ag::sigmoid(a));
  return ag::scale(ag::add(ab, ba), 0.5);
}

ag::Var class_consistency(const ag::Var& a, const ag::Var& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw std::invalid_argument("class_consistency: shape mismatch");
  return ag::jsd_softmax_pair(a, b);
}

ag::Var consistency_loss(const segnet::DecoderTrace& ta,
                         const segnet::DecoderTrace& tb,
                         const LossWeights& w) {
  if (ta.blocks.size() != tb.blocks.size())
    throw std::invalid_argument(
        "consistency_loss: traces have different numbers of blocks");
  if (ta.blocks.empty())
    throw std::invalid_argument("consistency_loss: empty trace");
  Var total;
  for (std::size_t s = 0; s < ta.blocks.size(); ++s) {
    const Var mc = mask_consistency(ta.blocks[s].mask_logits_full,
                                    tb.blocks[s].mask_logits_full);
    const Var cc = class_consistency(ta.blocks[s].class_logits,
                                     tb.blocks[s].class_logits);
    const Var term =
        ag::add(ag::scale(mc, w.lambda_mc), ag::scale(cc, w.lambda_cc));
    total = total ? ag::add(total, term) : term;
  }
  return total;
}

ag::Var segmentation_loss(const segnet::DecoderTrace& trace,
                          const LabelMap& gt, const LossWeights& w) {
  if (trace.blocks.empty())
    throw std::invalid_argument("segmentation_loss: empty trace");
  const Index k = trace.blocks[0].class_logits->value.rows();
  const Index nq = trace.blocks[0].class_logits->value.cols();
  if (nq != k)
    throw std::invalid_argument(
        "segmentation_loss: fixed matching needs one query per class");
  if (gt.rows() != trace.height || gt.cols() != trace.width)
    throw std::invalid_argument("segmentation_loss: label map size mismatch");

  const Index hw = static_cast<Index>(trace.height) * trace.width;
  Mat targets = Mat::Zero(k, hw);
  Mat weights = Mat::Zero(k, hw);
  for (Index y = 0; y < gt.rows(); ++y)
    for (Index x = 0; x < gt.cols(); ++x) {
      const int v = gt(y, x);
      const Index j = y * gt.cols() + x;
      if (v == kIgnoreLabel) continue;
      if (v < 0 || v >= k)
        throw std::invalid_argument(
            "segmentation_loss: label value " + std::to_string(v) +
            " invalid (num_classes=" + std::to_string(k) + ")");
      weights.col(j).setOnes();
      targets(v, j) = 1.0;
    }

  std::vector<int> cls_targets(static_cast<std::size_t>(k));
  for (Index q = 0; q < k; ++q) cls_targets[static_cast<std::size_t>(q)] =
      static_cast<int>(q);

  Var total;
  for (const auto& blk : trace.blocks) {
    const Var lc = ag::ce_cols(blk.class_logits, cls_targets);
    const Var lb = ag::bce_logits(blk.mask_logits_full, targets, weights);
    const Var ld = ag::dice_loss(blk.mask_logits_full, targets, weights);
    const Var term = ag::add(
        lc, ag::add(ag::scale(lb, w.lambda_bce), ag::scale(ld, w.lambda_dice)));
    total = total ? ag::add(total, term) : term;
  }
  return total;
}

ag::Var reg_language(const ag::Var& text, const Mat& template_text) {
  if (text->value.rows() != template_text.rows() ||
      text->value.cols() != template_text.cols())
    throw std::invalid_argument("reg_language: shape mismatch");
  for (Index c = 0; c < text->value.cols(); ++c)
    if (text->value.col(c).norm() == 0.0)
      throw std::invalid_argument("reg_language: text feature " +
                                  std::to_string(c) + " has zero norm");
  Mat t0 = template_text;
  for (Index c = 0; c < t0.cols(); ++c) {
    const Scalar n = t0.col(c).norm();
    if (n == 0.0)
      throw std::invalid_argument("reg_language: template feature " +
                                  std::to_string(c) + " has zero norm");
    t0.col(c) /= n;
  }
  const Var scores = ag::matmul(ag::transpose(ag::constant(t0)),
                                ag::l2normalize_cols(text));
  std::vector<int> targets(static_cast<std::size_t>(t0.cols()));
  for (std::size_t i = 0; i < targets.size(); ++i)
    targets[i] = static_cast<int>(i);
  return ag::ce_cols(scores, targets);
}

std::vector<int> downsample_labels_majority(const LabelMap& gt, int patch) {
  if (patch < 1 || gt.rows() % patch != 0 || gt.cols() % patch != 0)
    throw std::invalid_argument(
        "downsample_labels_majority: label map not divisible by patch size");
  const Index gh = gt.rows() / patch, gw = gt.cols() / patch;
  std::vector<int> out(static_cast<std::size_t>(gh * gw), -1);
  std::vector<int> counts;
  for (Index py = 0; py < gh; ++py)
    for (Index px = 0; px < gw; ++px) {
      counts.assign(256, 0);
      for (Index iy = 0; iy < patch; ++iy)
        for (Index ix = 0; ix < patch; ++ix) {
          const int v = gt(py * patch + iy, px * patch + ix);
          if (v != kIgnoreLabel && v >= 0 && v < 256)
            counts[static_cast<std::size_t>(v)]++;
        }
      int best = -1, best_count = 0;
      for (int v = 0; v < 256; ++v)
        if (counts[static_cast<std::size_t>(v)] > best_count) {
          best = v;
          best_count = counts[static_cast<std::size_t>(v)];
        }
      out[static_cast<std::size_t>(py * gw + px)] = best;
    }
  return out;
}

ag::Var reg_vision_language(segnet::SegModel& model,
                            const segnet::ImageFeatures& feats,
                            const ag::Var& text, const LabelMap& gt,
                            Scalar tau_vl) {
  if (!(tau_vl > 0.0) || !std::isfinite(tau_vl))
    throw std::invalid_argument("reg_vision_language: tau_vl must be > 0");
  auto& s = model.store;
  const Var vproj = ag::l2normalize_cols(ag::add_colvec(
      ag::matmul(s.at("proj.vl_w"), feats.patch), s.at("proj.vl_b")));
  const Var that = ag::l2normalize_cols(text);
  const Var scores =
      ag::scale(ag::matmul(ag::transpose(that), vproj), 1.0 / tau_vl);
  const std::vector<int> targets =
      downsample_labels_majority(gt, model.cfg.patch_size);
  if (static_cast<Index>(targets.size()) != feats.patch->value.cols())
    throw std::invalid_argument(
        "reg_vision_language: label grid does not match the patch grid");
  return ag::ce_cols(scores, targets);
}

ag::Var reg_vision(const ag::Var& cls, const Mat& frozen_cls) {
  if (cls->value.rows() != frozen_cls.rows() ||
      cls->value.cols() != frozen_cls.cols())
    throw std::invalid_argument("reg_vision: shape mismatch");
  return ag::norm2(ag::sub(cls, ag::constant(frozen_cls)));
}

ag::Var total_loss(const LossComponents& c, const LossWeights& w) {
  const auto check = [](const Var& v, const char* name) {
    if (v && !std::isfinite(v->value(0, 0)))
      throw std::runtime_error(std::string("total_loss: ") + name +
                               " is not finite");
  };
  check(c.seg, "L_seg");
  check(c.reg_language, "L_reg_language");
  check(c.reg_vision_language, "L_reg_vision_language");
  check(c.reg_vision, "L_reg_vision");
  check(c.contra, "L_contra");
  check(c.cons, "L_cons");

  Var total = c.seg ? c.seg : ag::constant(Mat::Zero(1, 1));
  Var reg;
  for (const Var& part : {c.reg_language, c.reg_vision_language, c.reg_vision})
    if (part) reg = reg ? ag::add(reg, part) : part;
  if (reg) total = ag::add(total, ag::scale(reg, w.lambda_reg));
  if (c.contra) total = ag::add(total, ag::scale(c.contra, w.lambda_contra));
  if (c.cons) total = ag::add(total, ag::scale(c.cons, w.lambda_cons));
  return total;
}

}  // namespace dgseg::losses
