#include "dgseg/prompts.hpp"

#include <stdexcept>

namespace dgseg::prompts {

using ag::Var;

namespace {
constexpr Scalar kBnEps = 1e-5;
}

ag::Var domain_embeddings(segnet::SegModel& model, const Mat& cls_tokens,
                          bool training) {
  const int Dv = model.cfg.dim_v;
  if (cls_tokens.rows() != Dv || cls_tokens.cols() < 1)
    throw std::invalid_argument(
        "domain_embedding: expected (" + std::to_string(Dv) +
        " x N) class tokens, got (" + std::to_string(cls_tokens.rows()) +
        " x " + std::to_string(cls_tokens.cols()) + ")");
  if (!cls_tokens.allFinite())
    throw std::invalid_argument("domain_embedding: class tokens must be finite");
  if (!model.cfg.domain_aware || model.cfg.clamp_pi)
    return ag::constant(Mat::Zero(model.cfg.dim_tok, cls_tokens.cols()));

  auto& s = model.store;
  Mat mean, var;
  if (training) {
    mean = cls_tokens.rowwise().mean();
    var = (cls_tokens.colwise() - mean.col(0)).array().square().rowwise().sum() /
          static_cast<Scalar>(cls_tokens.cols());
  } else {
    mean = s.buffer_at("hgen.bn_mean");
    var = s.buffer_at("hgen.bn_var");
  }
  const Mat inv_sd = (var.array() + kBnEps).sqrt().inverse();
  // The inputs and their batch statistics are constants w.r.t. theta, so the
  // normalized activations enter the graph as a plain affine map of gamma/beta.
  const Mat xn = (cls_tokens.colwise() - mean.col(0)).array().colwise() *
                 inv_sd.col(0).array();
  const Var bn = ag::add_colvec(
      ag::mul_colvec(ag::constant(xn), s.at("hgen.bn_g")), s.at("hgen.bn_b"));
  const Var h = ag::relu(
      ag::add_colvec(ag::matmul(s.at("hgen.w1"), bn), s.at("hgen.b1")));
  return ag::add_colvec(ag::matmul(s.at("hgen.w2"), h), s.at("hgen.b2"));
}

ag::Var domain_embedding(segnet::SegModel& model, const Mat& cls_token,
                         bool training) {
  if (cls_token.cols() != 1)
    throw std::invalid_argument("domain_embedding: expected a single column");
  return domain_embeddings(model, cls_token, training);
}

void update_bn_stats(segnet::SegModel& model, const Mat& cls_tokens,
                     Scalar momentum) {
  const int Dv = model.cfg.dim_v;
  if (cls_tokens.rows() != Dv || cls_tokens.cols() < 1)
    throw std::invalid_argument("update_bn_stats: dimension mismatch");
  if (momentum <= 0.0 || momentum > 1.0)
    throw std::invalid_argument("update_bn_stats: momentum must be in (0, 1]");
  const Mat mean = cls_tokens.rowwise().mean();
  const Mat var =
      (cls_tokens.colwise() - mean.col(0)).array().square().rowwise().sum() /
      static_cast<Scalar>(cls_tokens.cols());
  auto& s = model.store;
  s.buffer_at("hgen.bn_mean") =
      (1.0 - momentum) * s.buffer_at("hgen.bn_mean") + momentum * mean;
  s.buffer_at("hgen.bn_var") =
      (1.0 - momentum) * s.buffer_at("hgen.bn_var") + momentum * var;
}

ag::Var compose_prompt(segnet::SegModel& model, const ag::Var& pi) {
  const Var& p = model.store.at("prompt.p");
  if (pi->value.rows() != p->value.rows() || pi->value.cols() != 1)
    throw std::invalid_argument(
        "compose_prompt: pi must be (" + std::to_string(p->value.rows()) +
        " x 1)");
  if (!pi->needs_grad && pi->value.isZero(0.0)) return p;
  return ag::add_colvec(p, pi);
}

ag::Var domain_aware_text_features(segnet::SegModel& model, const Image& img) {
  const segnet::FrozenFeatures f = segnet::encode_image_frozen(model, img);
  const Var pi = domain_embedding(model, f.cls, /*training=*/false);
  return segnet::encode_text(model, compose_prompt(model, pi));
}

}  // namespace dgseg::prompts
