#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

#include "dgseg/autodiff.hpp"
#include "dgseg/config.hpp"
#include "dgseg/image.hpp"
#include "dgseg/types.hpp"

namespace dgseg::segnet {

struct ModelConfig {
  int num_classes = 5;    // K
  int patch_size = 8;     // ps
  int dim_v = 64;         // image encoder width D_v
  int dim_pix = 64;       // pixel feature dim D
  int dim_tok = 32;       // text token/feature dim C
  int dim_query = 64;     // query dim L
  int context_tokens = 4; // M
  int enc_blocks = 2;
  int dec_blocks = 3;     // S
  int hgen_hidden = 64;
  std::int64_t init_seed = 1;
  std::int64_t text_seed = 42;
  bool domain_aware = true;
  // Forces the domain embedding to exact zero (fixed-prompt reduction).
  bool clamp_pi = false;

  static ModelConfig from_config(const Config& cfg);
  void validate() const;
};

// Named parameter/buffer storage. Iteration over std::map is sorted by
// name, which fixes optimizer and serialization order.
struct ParamStore {
  std::map<std::string, ag::Var> params;   // trainable
  std::map<std::string, Mat> frozen;       // fixed tensors, hashed
  std::map<std::string, Mat> buffers;      // running stats

  ag::Var& at(const std::string& name);
  const ag::Var& at(const std::string& name) const;
  const Mat& frozen_at(const std::string& name) const;
  Mat& buffer_at(const std::string& name);
  const Mat& buffer_at(const std::string& name) const;

  std::uint64_t frozen_hash() const;
  std::uint64_t trainable_hash() const;
  void zero_grads();
};

struct SegModel {
  explicit SegModel(const ModelConfig& cfg);

  ModelConfig cfg;
  ParamStore store;

  // Frozen template text features, L2-normalized per class column (C x K).
  Mat template_text;

  // Caches keyed by geometry; content is deterministic.
  std::map<std::pair<int, int>, Mat> pos_cache;
  std::map<std::tuple<int, int, int, int>, std::shared_ptr<ag::GatherPlan>>
      plan_cache;

  const Mat& patch_pos(int grid_h, int grid_w);
  std::shared_ptr<const ag::GatherPlan> upsample_plan(int grid_h, int grid_w,
                                                      int height, int width);
};

struct ImageFeatures {
  ag::Var patch;  // (D_v, P), column per patch
  ag::Var cls;    // (D_v, 1)
  int grid_h = 0;
  int grid_w = 0;
};

struct PixelFeatures {
  ag::Var z_patch;  // (D, P)
  ag::Var z_full;   // (D, H*W), pixel j = y*W + x
  int height = 0;
  int width = 0;
};

struct DecoderBlockOut {
  ag::Var queries;           // (L, N_q)
  ag::Var class_logits;      // (K, N_q)
  ag::Var mask_embed;        // (D, N_q)
  ag::Var mask_logits_patch; // (N_q, P)
  ag::Var mask_logits_full;  // (N_q, H*W)
  Mat attn_mask;             // (P, N_q) effective cross-attention mask
};

struct DecoderTrace {
  std::vector<DecoderBlockOut> blocks;
  int height = 0;
  int width = 0;
};

// Constant patch matrix (3*ps^2, P) extracted from an image.
Mat patchify(const Image& img, int ps);

// Trainable-encoder forward. Throws if H or W is not divisible by ps.
ImageFeatures encode_image(SegModel& model, const Image& img);

// Same architecture run with the frozen snapshot taken at initialization.
struct FrozenFeatures {
  Mat patch;
  Mat cls;
  int grid_h = 0;
  int grid_w = 0;
};
FrozenFeatures encode_image_frozen(SegModel& model, const Image& img);

// Frozen text encoder over [prompt tokens, class embedding]; differentiable
// w.r.t. the prompt. Returns per-class features (C, K).
ag::Var encode_text(SegModel& model, const ag::Var& prompt);

// Query initialization MLP applied to text features: (C, K) -> (L, K).
ag::Var query_init(SegModel& model, const ag::Var& text);

PixelFeatures pixel_decode(SegModel& model, const ImageFeatures& feats,
                           const ag::Var& text, const Image& img);

// The masked cross-attention sublayer of one decoder block (residual
// included); exposed so the masked-attention locality property can be tested
// directly, before self-attention mixes the queries.
ag::Var masked_cross_attention(SegModel& model, int block,
                               const ag::Var& queries, const ag::Var& z_patch,
                               const Mat& attn_mask);

// One full decoder block (masked cross-attention, self-attention, FFN) given
// an explicit cross-attention mask (P, N_q).
ag::Var decode_block(SegModel& model, int block, const ag::Var& queries,
                     const ag::Var& z_patch, const Mat& attn_mask);

DecoderTrace transformer_decode(SegModel& model, const PixelFeatures& pix,
                                const ag::Var& q0);

// Effective attention mask derived from previous-block patch mask logits:
// entries with sigmoid(logit) > 0.5 are allowed; a query whose mask would be
// empty falls back to attending everywhere.
Mat attention_mask_from_logits(const Mat& prev_patch_logits);

// Semantic logits y[k] = sum_q softmax(c)_qk * sigmoid(mask_q): (K, H*W).
// block is 1-based.
ag::Var assemble_semantic_map(const DecoderTrace& trace, int block);

// Predicted label map from block S.
LabelMap predict_labels(const DecoderTrace& trace);

}  // namespace dgseg::segnet
