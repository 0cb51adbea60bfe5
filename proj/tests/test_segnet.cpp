#include <cmath>

#include "doctest.h"
#include "dgseg/segnet.hpp"
#include "gradcheck.hpp"
#include "testutil.hpp"

using namespace dgseg;
using namespace dgseg::segnet;

namespace {

Image test_image(std::uint64_t seed, int h = 16, int w = 16) {
  Rng rng(seed);
  return testutil::random_image(rng, h, w);
}

}  // namespace

TEST_CASE("segnet: model config validation names the offending field") {
  auto mc = testutil::tiny_model_config();
  mc.dim_v = 6;  // not a multiple of 4
  CHECK_THROWS_WITH_AS(mc.validate(), doctest::Contains("model.dim_v"),
                       std::invalid_argument);
  mc = testutil::tiny_model_config();
  mc.num_classes = 1;
  CHECK_THROWS_WITH_AS(mc.validate(), doctest::Contains("model.num_classes"),
                       std::invalid_argument);
  mc = testutil::tiny_model_config();
  mc.dec_blocks = 0;
  CHECK_THROWS_WITH_AS(mc.validate(), doctest::Contains("model.dec_blocks"),
                       std::invalid_argument);
}

TEST_CASE("segnet: parameter store lookups") {
  SegModel model(testutil::tiny_model_config());
  CHECK_THROWS_WITH_AS(model.store.at("nope"),
                       doctest::Contains("unknown parameter: nope"),
                       std::out_of_range);
  CHECK_THROWS_AS(model.store.frozen_at("nope"), std::out_of_range);
  CHECK(model.store.at("prompt.p")->value.rows() == 8);   // C
  CHECK(model.store.at("prompt.p")->value.cols() == 2);   // M
  // Frozen snapshot mirrors the trainable encoder at initialization.
  CHECK(testutil::mats_equal_bits(model.store.frozen_at("venc0.enc.patch_w"),
                                  model.store.at("enc.patch_w")->value));
}

TEST_CASE("segnet: parameter hashes respond to the right halves") {
  SegModel a(testutil::tiny_model_config());
  SegModel b(testutil::tiny_model_config());
  CHECK(a.store.frozen_hash() == b.store.frozen_hash());
  CHECK(a.store.trainable_hash() == b.store.trainable_hash());
  b.store.at("prompt.p")->value(0, 0) += 1.0;
  CHECK(a.store.frozen_hash() == b.store.frozen_hash());
  CHECK(a.store.trainable_hash() != b.store.trainable_hash());
}

TEST_CASE("segnet: init is deterministic per seed") {
  auto mc = testutil::tiny_model_config();
  SegModel a(mc), b(mc);
  CHECK(a.store.trainable_hash() == b.store.trainable_hash());
  mc.init_seed = 2;
  SegModel c(mc);
  CHECK(a.store.trainable_hash() != c.store.trainable_hash());
  mc.init_seed = 1;
  mc.text_seed = 43;
  SegModel d(mc);
  CHECK(a.store.frozen_hash() != d.store.frozen_hash());
}

TEST_CASE("segnet: encode_image shapes and divisibility check") {
  SegModel model(testutil::tiny_model_config());
  const auto feats = encode_image(model, test_image(1));
  CHECK(feats.grid_h == 2);
  CHECK(feats.grid_w == 2);
  CHECK(feats.patch->value.rows() == 8);
  CHECK(feats.patch->value.cols() == 4);
  CHECK(feats.cls->value.rows() == 8);
  CHECK(feats.cls->value.cols() == 1);
  CHECK_THROWS_WITH_AS(encode_image(model, test_image(2, 12, 16)),
                       doctest::Contains("not divisible by patch_size"),
                       std::invalid_argument);
}

TEST_CASE("segnet: zero image produces finite features") {
  SegModel model(testutil::tiny_model_config());
  const auto feats = encode_image(model, Image::zero(16, 16));
  CHECK(feats.patch->value.allFinite());
  CHECK(feats.cls->value.allFinite());
}

TEST_CASE("segnet: frozen encoder equals the trainable one at init") {
  SegModel model(testutil::tiny_model_config());
  const auto img = test_image(3);
  const auto live = encode_image(model, img);
  const auto frozen = encode_image_frozen(model, img);
  CHECK(testutil::mats_equal_bits(live.patch->value, frozen.patch));
  CHECK(testutil::mats_equal_bits(live.cls->value, frozen.cls));

  // ... and diverges once the trainable weights move.
  model.store.at("enc.patch_w")->value(0, 0) += 0.5;
  const auto live2 = encode_image(model, img);
  const auto frozen2 = encode_image_frozen(model, img);
  CHECK(testutil::mats_equal_bits(frozen2.patch, frozen.patch));
  CHECK(!testutil::mats_equal_bits(live2.patch->value, frozen2.patch));
}

TEST_CASE("segnet: encode_text is deterministic and prompt-sensitive") {
  SegModel model(testutil::tiny_model_config());
  const auto& p = model.store.at("prompt.p");
  const auto a = encode_text(model, p);
  const auto b = encode_text(model, p);
  CHECK(testutil::mats_equal_bits(a->value, b->value));
  CHECK(a->value.rows() == 8);  // C
  CHECK(a->value.cols() == 3);  // K

  Rng rng(5);
  const auto other =
      ag::constant(testutil::random_mat(rng, 8, 2, 0.5));
  const auto c = encode_text(model, other);
  for (Index k = 0; k < 3; ++k)
    CHECK((a->value.col(k) - c->value.col(k)).norm() > 0.0);

  CHECK_THROWS_WITH_AS(
      encode_text(model, ag::constant(Mat::Zero(3, 5))),
      doctest::Contains("encode_text: prompt must be (8 x 2), got (3 x 5)"),
      std::invalid_argument);
}

TEST_CASE("segnet: gradient of ||t||^2 w.r.t. the prompt") {
  SegModel model(testutil::tiny_model_config());
  auto& p = model.store.at("prompt.p");
  Rng rng(6);
  const auto res = gradcheck::check(
      [&] {
        const auto t = encode_text(model, p);
        return ag::sum(ag::cmul(t, t));
      },
      {{"prompt.p", p}}, rng, 0);
  INFO("worst: ", res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("segnet: query_init maps text features to queries") {
  SegModel model(testutil::tiny_model_config());
  const auto t = encode_text(model, model.store.at("prompt.p"));
  const auto q = query_init(model, t);
  CHECK(q->value.rows() == 8);  // L
  CHECK(q->value.cols() == 3);  // N_q = K
  CHECK(q->value.allFinite());
}

TEST_CASE("segnet: pixel_decode emits full-resolution features") {
  SegModel model(testutil::tiny_model_config());
  const auto img = test_image(7);
  const auto feats = encode_image(model, img);
  const auto text = encode_text(model, model.store.at("prompt.p"));
  const auto pix = pixel_decode(model, feats, text, img);
  CHECK(pix.z_patch->value.rows() == 8);      // D
  CHECK(pix.z_patch->value.cols() == 4);      // P
  CHECK(pix.z_full->value.rows() == 8);
  CHECK(pix.z_full->value.cols() == 16 * 16);
  CHECK(pix.height == 16);
  CHECK(pix.width == 16);

  // Text-to-pixel attention is active: replacing the text features with a
  // different matrix changes z.
  Rng rng(8);
  const auto text2 =
      ag::constant(testutil::random_mat(rng, 8, 3, 0.5));
  const auto pix2 = pixel_decode(model, feats, text2, img);
  CHECK((pix.z_patch->value - pix2.z_patch->value).cwiseAbs().maxCoeff() >
        1e-12);
}

TEST_CASE("segnet: upsample plan matches a bilinear oracle") {
  SegModel model(testutil::tiny_model_config());
  const int gh = 2, gw = 2, H = 16, W = 16;
  const auto plan = model.upsample_plan(gh, gw, H, W);
  Rng rng(9);
  const Mat coarse = testutil::random_mat(rng, 3, gh * gw);
  const auto full = ag::gather_cols(ag::constant(coarse), plan);
  REQUIRE(full->value.cols() == H * W);

  // align_corners=false bilinear with edge clamping, computed directly.
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const Scalar sy = (y + 0.5) * gh / static_cast<Scalar>(H) - 0.5;
      const Scalar sx = (x + 0.5) * gw / static_cast<Scalar>(W) - 0.5;
      const int y0 = static_cast<int>(std::floor(sy));
      const int x0 = static_cast<int>(std::floor(sx));
      const Scalar fy = sy - y0;
      const Scalar fx = sx - x0;
      auto at = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, gh - 1);
        xx = std::clamp(xx, 0, gw - 1);
        return coarse.col(yy * gw + xx);
      };
      const Mat expect = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      const Mat got = full->value.col(y * W + x);
      CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("segnet: attention mask binarizes previous logits") {
  Mat logits(2, 3);  // (N_q, P)
  logits << 1.0, -1.0, 0.5,
            -2.0, -3.0, -4.0;
  const Mat mask = attention_mask_from_logits(logits);
  CHECK(mask.rows() == 3);  // (P, N_q)
  CHECK(mask.cols() == 2);
  CHECK(mask(0, 0) == 1.0);
  CHECK(mask(1, 0) == 0.0);
  CHECK(mask(2, 0) == 1.0);
  // Query 1 has no positive logits: degenerate-mask guard opens it fully.
  CHECK(mask.col(1).minCoeff() == 1.0);
}

TEST_CASE("segnet: transformer_decode emits one entry per block") {
  SegModel model(testutil::tiny_model_config(3, 3));
  const auto img = test_image(10);
  const auto feats = encode_image(model, img);
  const auto text = encode_text(model, model.store.at("prompt.p"));
  const auto pix = pixel_decode(model, feats, text, img);
  const auto q0 = query_init(model, text);
  const auto trace = transformer_decode(model, pix, q0);
  REQUIRE(trace.blocks.size() == 3);
  for (const auto& blk : trace.blocks) {
    CHECK(blk.class_logits->value.rows() == 3);
    CHECK(blk.class_logits->value.cols() == 3);
    CHECK(blk.mask_logits_patch->value.rows() == 3);
    CHECK(blk.mask_logits_patch->value.cols() == 4);
    CHECK(blk.mask_logits_full->value.cols() == 16 * 16);
    CHECK(blk.attn_mask.rows() == 4);
    CHECK(blk.attn_mask.cols() == 3);
  }
  // Block 1 attends everywhere; later blocks binarize the previous logits.
  CHECK(trace.blocks[0].attn_mask.minCoeff() == 1.0);
  const Mat expect1 =
      attention_mask_from_logits(trace.blocks[0].mask_logits_patch->value);
  CHECK((trace.blocks[1].attn_mask - expect1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("segnet: masked attention is local to the allowed patches") {
  SegModel model(testutil::tiny_model_config());
  Rng rng(11);
  const auto queries = ag::constant(testutil::random_mat(rng, 8, 3, 0.5));
  const Mat zbase = testutil::random_mat(rng, 8, 4, 0.5);
  Mat mask = Mat::Zero(4, 3);  // (P, N_q)
  mask(1, 0) = 1.0;
  mask(2, 0) = 1.0;
  mask(0, 1) = 1.0;
  mask.col(2).setOnes();

  const auto out_a =
      masked_cross_attention(model, 0, queries, ag::constant(zbase), mask);
  // Zero the patches query 0 is NOT allowed to see; its output column must
  // not move. (Only the cross-attention sublayer has this property; the
  // full block mixes queries through self-attention afterwards.)
  Mat zmod = zbase;
  zmod.col(0).setZero();
  zmod.col(3).setZero();
  const auto out_b =
      masked_cross_attention(model, 0, queries, ag::constant(zmod), mask);
  CHECK((out_a->value.col(0) - out_b->value.col(0)).cwiseAbs().maxCoeff() ==
        0.0);
  // A fully-open query does see those patches.
  CHECK((out_a->value.col(2) - out_b->value.col(2)).cwiseAbs().maxCoeff() >
        1e-12);
  // Bad block index is rejected.
  CHECK_THROWS_WITH_AS(
      masked_cross_attention(model, 5, queries, ag::constant(zbase), mask),
      doctest::Contains("out of range"), std::invalid_argument);
}

TEST_CASE("segnet: assemble_semantic_map matches the triple-loop oracle") {
  SegModel model(testutil::tiny_model_config(3, 2));
  // 8x8 image -> 1x1 patch grid at ps=8 is degenerate; use 16x16 (2x2).
  const auto img = test_image(12);
  const auto feats = encode_image(model, img);
  const auto text = encode_text(model, model.store.at("prompt.p"));
  const auto pix = pixel_decode(model, feats, text, img);
  const auto trace = transformer_decode(model, pix, query_init(model, text));
  const auto sem = assemble_semantic_map(trace, 2);
  CHECK(sem->value.rows() == 3);
  CHECK(sem->value.cols() == 16 * 16);

  const auto& blk = trace.blocks[1];
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 16 * 16; j += 37) {
      Scalar expect = 0.0;
      for (int q = 0; q < 3; ++q) {
        // softmax over classes for query q
        Scalar mx = blk.class_logits->value.col(q).maxCoeff();
        Scalar z = 0.0;
        for (int kk = 0; kk < 3; ++kk)
          z += std::exp(blk.class_logits->value(kk, q) - mx);
        const Scalar soft =
            std::exp(blk.class_logits->value(k, q) - mx) / z;
        const Scalar m =
            1.0 / (1.0 + std::exp(-blk.mask_logits_full->value(q, j)));
        expect += soft * m;
      }
      CHECK(sem->value(k, j) == doctest::Approx(expect).epsilon(1e-9));
    }

  CHECK_THROWS_WITH_AS(assemble_semantic_map(trace, 3),
                       doctest::Contains("out of range"),
                       std::invalid_argument);
  CHECK_THROWS_AS(assemble_semantic_map(trace, 0), std::invalid_argument);
}

TEST_CASE("segnet: one-hot classes and hard masks drive the argmax") {
  // Hand-build a trace: query k claims class k with a saturated logit and a
  // hard mask over its own strip of pixels.
  DecoderTrace trace;
  trace.height = 1;
  trace.width = 6;
  DecoderBlockOut blk;
  Mat cls = Mat::Constant(3, 3, -30.0);
  cls.diagonal().setConstant(30.0);
  blk.class_logits = ag::constant(cls);
  Mat masks = Mat::Constant(3, 6, -30.0);
  masks.block(0, 0, 1, 2).setConstant(30.0);
  masks.block(1, 2, 1, 2).setConstant(30.0);
  masks.block(2, 4, 1, 2).setConstant(30.0);
  blk.mask_logits_full = ag::constant(masks);
  blk.mask_logits_patch = blk.mask_logits_full;
  trace.blocks.push_back(blk);
  const LabelMap pred = predict_labels(trace);
  CHECK(pred.rows() == 1);
  CHECK(pred.cols() == 6);
  CHECK(pred(0, 0) == 0);
  CHECK(pred(0, 1) == 0);
  CHECK(pred(0, 2) == 1);
  CHECK(pred(0, 3) == 1);
  CHECK(pred(0, 4) == 2);
  CHECK(pred(0, 5) == 2);
}

TEST_CASE("segnet: end-to-end gradients on a tiny model") {
  SegModel model(testutil::tiny_model_config(3, 2));
  const auto img = test_image(13);
  auto& prompt = model.store.at("prompt.p");
  auto& wq = model.store.at("dec.b0.sq_w");
  auto& cls_w = model.store.at("head.cls_w");
  Rng rng(14);
  const auto res = gradcheck::check(
      [&] {
        const auto feats = encode_image(model, img);
        const auto text = encode_text(model, prompt);
        const auto pix = pixel_decode(model, feats, text, img);
        const auto trace =
            transformer_decode(model, pix, query_init(model, text));
        const auto sem = assemble_semantic_map(trace, 2);
        return ag::mean(ag::cmul(sem, sem));
      },
      {{"prompt.p", prompt}, {"dec.b0.sq_w", wq}, {"head.cls_w", cls_w}}, rng,
      4);
  INFO("worst: ", res.worst);
  CHECK(res.max_rel_err < 1e-4);
}
