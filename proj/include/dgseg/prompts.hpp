#pragma once

#include "dgseg/autodiff.hpp"
#include "dgseg/segnet.hpp"
#include "dgseg/types.hpp"

namespace dgseg::prompts {

// Domain embeddings pi for a batch of frozen class tokens (dim_v x N), one
// column per image. In training mode the normalization uses batch statistics
// of `cls_tokens` (treated as constants); in eval mode it uses the stored
// running buffers. With domain adaptation disabled (model.cfg.domain_aware
// false or model.cfg.clamp_pi true) returns a constant zero matrix.
ag::Var domain_embeddings(segnet::SegModel& model, const Mat& cls_tokens,
                          bool training);

ag::Var domain_embedding(segnet::SegModel& model, const Mat& cls_token,
                         bool training);

// Exponential update of the running normalization buffers from a batch of
// frozen class tokens. Called by the trainer once per step.
void update_bn_stats(segnet::SegModel& model, const Mat& cls_tokens,
                     Scalar momentum = 0.1);

// p_x = p + pi, broadcast over the M context tokens. A constant all-zero pi
// returns the context prompt node unchanged.
ag::Var compose_prompt(segnet::SegModel& model, const ag::Var& pi);

// t_x = encode_text(compose_prompt(p, h(F(x)))), eval-mode normalization.
ag::Var domain_aware_text_features(segnet::SegModel& model, const Image& img);

}  // namespace dgseg::prompts
