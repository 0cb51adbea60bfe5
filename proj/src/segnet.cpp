#include "dgseg/segnet.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

#include "dgseg/hashing.hpp"
#include "dgseg/rng.hpp"

namespace dgseg::segnet {

using ag::Var;

ModelConfig ModelConfig::from_config(const Config& cfg) {
  ModelConfig m;
  m.num_classes = static_cast<int>(cfg.get_int("model.num_classes", m.num_classes));
  m.patch_size = static_cast<int>(cfg.get_int("model.patch_size", m.patch_size));
  m.dim_v = static_cast<int>(cfg.get_int("model.dim_v", m.dim_v));
  m.dim_pix = static_cast<int>(cfg.get_int("model.dim_pix", m.dim_pix));
  m.dim_tok = static_cast<int>(cfg.get_int("model.dim_tok", m.dim_tok));
  m.dim_query = static_cast<int>(cfg.get_int("model.dim_query", m.dim_query));
  m.context_tokens =
      static_cast<int>(cfg.get_int("model.context_tokens", m.context_tokens));
  m.enc_blocks = static_cast<int>(cfg.get_int("model.enc_blocks", m.enc_blocks));
  m.dec_blocks = static_cast<int>(cfg.get_int("model.dec_blocks", m.dec_blocks));
  m.hgen_hidden = static_cast<int>(cfg.get_int("model.hgen_hidden", m.hgen_hidden));
  m.init_seed = cfg.get_int("model.init_seed", m.init_seed);
  m.text_seed = cfg.get_int("model.text_seed", m.text_seed);
  m.domain_aware = cfg.get_bool("model.domain_aware", m.domain_aware);
  m.clamp_pi = cfg.get_bool("model.clamp_pi", m.clamp_pi);
  m.validate();
  return m;
}

void ModelConfig::validate() const {
  if (num_classes < 2)
    throw std::invalid_argument("model.num_classes must be >= 2");
  if (patch_size < 2) throw std::invalid_argument("model.patch_size must be >= 2");
  if (dim_v < 4 || dim_v % 4 != 0)
    throw std::invalid_argument("model.dim_v must be a positive multiple of 4");
  if (dim_pix < 2) throw std::invalid_argument("model.dim_pix must be >= 2");
  if (dim_tok < 2 || dim_tok % 2 != 0)
    throw std::invalid_argument("model.dim_tok must be a positive even number");
  if (dim_query < 2) throw std::invalid_argument("model.dim_query must be >= 2");
  if (context_tokens < 1)
    throw std::invalid_argument("model.context_tokens must be >= 1");
  if (enc_blocks < 1) throw std::invalid_argument("model.enc_blocks must be >= 1");
  if (dec_blocks < 1) throw std::invalid_argument("model.dec_blocks must be >= 1");
  if (hgen_hidden < 2) throw std::invalid_argument("model.hgen_hidden must be >= 2");
}

ag::Var& ParamStore::at(const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end())
    throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const ag::Var& ParamStore::at(const std::string& name) const {
  const auto it = params.find(name);
  if (it == params.end())
    throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Mat& ParamStore::frozen_at(const std::string& name) const {
  const auto it = frozen.find(name);
  if (it == frozen.end())
    throw std::out_of_range("unknown frozen tensor: " + name);
  return it->second;
}

Mat& ParamStore::buffer_at(const std::string& name) {
  const auto it = buffers.find(name);
  if (it == buffers.end())
    throw std::out_of_range("unknown buffer: " + name);
  return it->second;
}

const Mat& ParamStore::buffer_at(const std::string& name) const {
  const auto it = buffers.find(name);
  if (it == buffers.end())
    throw std::out_of_range("unknown buffer: " + name);
  return it->second;
}

std::uint64_t ParamStore::frozen_hash() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, m] : frozen) {
    h = fnv1a64(name, h);
    h = fnv1a64(m, h);
  }
  return h;
}

std::uint64_t ParamStore::trainable_hash() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, v] : params) {
    h = fnv1a64(name, h);
    h = fnv1a64(v->value, h);
  }
  return h;
}

void ParamStore::zero_grads() {
  for (auto& [name, v] : params) {
    v->grad.setZero(v->value.rows(), v->value.cols());
    v->grad_ready = true;
  }
}

namespace {

Mat sinusoidal_1d(int dim, int n_tokens) {
  Mat pos(dim, n_tokens);
  for (int i = 0; i < n_tokens; ++i)
    for (int j = 0; j < dim / 2; ++j) {
      const Scalar f = std::pow(10000.0, -2.0 * j / dim);
      pos(2 * j, i) = std::sin(i * f);
      pos(2 * j + 1, i) = std::cos(i * f);
    }
  return pos;
}

}  // namespace

const Mat& SegModel::patch_pos(int grid_h, int grid_w) {
  const auto key = std::make_pair(grid_h, grid_w);
  auto it = pos_cache.find(key);
  if (it != pos_cache.end()) return it->second;
  const int half = cfg.dim_v / 2;
  Mat pos(cfg.dim_v, grid_h * grid_w);
  for (int py = 0; py < grid_h; ++py)
    for (int px = 0; px < grid_w; ++px) {
      const int p = py * grid_w + px;
      for (int j = 0; j < half / 2; ++j) {
        const Scalar f = std::pow(10000.0, -2.0 * j / half);
        pos(2 * j, p) = std::sin(px * f);
        pos(2 * j + 1, p) = std::cos(px * f);
        pos(half + 2 * j, p) = std::sin(py * f);
        pos(half + 2 * j + 1, p) = std::cos(py * f);
      }
    }
  return pos_cache.emplace(key, std::move(pos)).first->second;
}

std::shared_ptr<const ag::GatherPlan> SegModel::upsample_plan(int grid_h,
                                                              int grid_w,
                                                              int height,
                                                              int width) {
  const auto key = std::make_tuple(grid_h, grid_w, height, width);
  auto it = plan_cache.find(key);
  if (it != plan_cache.end()) return it->second;
  auto plan = std::make_shared<ag::GatherPlan>();
  plan->idx.resize(static_cast<std::size_t>(height) * width);
  plan->w.resize(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const Scalar gy = (y + 0.5) * grid_h / height - 0.5;
    const Scalar fy0 = std::floor(gy);
    const Scalar fy = gy - fy0;
    const int iy0 = std::clamp(static_cast<int>(fy0), 0, grid_h - 1);
    const int iy1 = std::clamp(static_cast<int>(fy0) + 1, 0, grid_h - 1);
    for (int x = 0; x < width; ++x) {
      const Scalar gx = (x + 0.5) * grid_w / width - 0.5;
      const Scalar fx0 = std::floor(gx);
      const Scalar fx = gx - fx0;
      const int ix0 = std::clamp(static_cast<int>(fx0), 0, grid_w - 1);
      const int ix1 = std::clamp(static_cast<int>(fx0) + 1, 0, grid_w - 1);
      const std::size_t j = static_cast<std::size_t>(y) * width + x;
      plan->idx[j] = {iy0 * grid_w + ix0, iy0 * grid_w + ix1,
                      iy1 * grid_w + ix0, iy1 * grid_w + ix1};
      plan->w[j] = {(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx,
                    fy * (1.0 - fx), fy * fx};
    }
  }
  return plan_cache.emplace(key, std::move(plan)).first->second;
}

SegModel::SegModel(const ModelConfig& c) : cfg(c) {
  cfg.validate();
  const int Dv = cfg.dim_v, D = cfg.dim_pix, C = cfg.dim_tok,
            L = cfg.dim_query, K = cfg.num_classes, M = cfg.context_tokens,
            ps = cfg.patch_size, Hh = cfg.hgen_hidden;

  Rng r(static_cast<std::uint64_t>(cfg.init_seed));
  auto w = [&](const std::string& name, Index rows, Index cols, Index fan) {
    store.params[name] =
        ag::param(r.normal_mat(rows, cols, 1.0 / std::sqrt(static_cast<Scalar>(fan))));
  };
  auto fill = [&](const std::string& name, Index rows, Index cols, Scalar v) {
    store.params[name] = ag::param(Mat::Constant(rows, cols, v));
  };
  auto small = [&](const std::string& name, Index rows, Index cols) {
    store.params[name] = ag::param(r.normal_mat(rows, cols, 0.02));
  };

  w("enc.patch_w", Dv, 3 * ps * ps, 3 * ps * ps);
  fill("enc.patch_b", Dv, 1, 0.0);
  small("enc.cls", Dv, 1);
  for (int i = 0; i < cfg.enc_blocks; ++i) {
    const std::string p = "enc.b" + std::to_string(i) + ".";
    fill(p + "ln1_g", Dv, 1, 1.0);
    fill(p + "ln1_b", Dv, 1, 0.0);
    w(p + "wq", Dv, Dv, Dv);
    fill(p + "bq", Dv, 1, 0.0);
    w(p + "wk", Dv, Dv, Dv);
    fill(p + "bk", Dv, 1, 0.0);
    w(p + "wv", Dv, Dv, Dv);
    fill(p + "bv", Dv, 1, 0.0);
    w(p + "wo", Dv, Dv, Dv);
    fill(p + "bo", Dv, 1, 0.0);
    fill(p + "ln2_g", Dv, 1, 1.0);
    fill(p + "ln2_b", Dv, 1, 0.0);
    w(p + "mlp_w1", 2 * Dv, Dv, Dv);
    fill(p + "mlp_b1", 2 * Dv, 1, 0.0);
    w(p + "mlp_w2", Dv, 2 * Dv, 2 * Dv);
    fill(p + "mlp_b2", Dv, 1, 0.0);
  }
  fill("enc.lnf_g", Dv, 1, 1.0);
  fill("enc.lnf_b", Dv, 1, 0.0);

  w("pix.in_w", D, Dv, Dv);
  fill("pix.in_b", D, 1, 0.0);
  w("pix.q_w", D, D, D);
  fill("pix.q_b", D, 1, 0.0);
  w("pix.k_w", D, C, C);
  fill("pix.k_b", D, 1, 0.0);
  w("pix.v_w", D, C, C);
  fill("pix.v_b", D, 1, 0.0);
  w("pix.o_w", D, D, D);
  fill("pix.o_b", D, 1, 0.0);
  fill("pix.ln_g", D, 1, 1.0);
  fill("pix.ln_b", D, 1, 0.0);
  w("pix.stem_w", D, 7, 7);
  fill("pix.stem_b", D, 1, 0.0);

  w("qproj.w1", L, C, C);
  fill("qproj.b1", L, 1, 0.0);
  w("qproj.w2", L, L, L);
  fill("qproj.b2", L, 1, 0.0);

  for (int i = 0; i < cfg.dec_blocks; ++i) {
    const std::string p = "dec.b" + std::to_string(i) + ".";
    fill(p + "lnc_g", L, 1, 1.0);
    fill(p + "lnc_b", L, 1, 0.0);
    w(p + "cq_w", L, L, L);
    fill(p + "cq_b", L, 1, 0.0);
    w(p + "ck_w", L, D, D);
    fill(p + "ck_b", L, 1, 0.0);
    w(p + "cv_w", L, D, D);
    fill(p + "cv_b", L, 1, 0.0);
    w(p + "co_w", L, L, L);
    fill(p + "co_b", L, 1, 0.0);
    fill(p + "lns_g", L, 1, 1.0);
    fill(p + "lns_b", L, 1, 0.0);
    w(p + "sq_w", L, L, L);
    fill(p + "sq_b", L, 1, 0.0);
    w(p + "sk_w", L, L, L);
    fill(p + "sk_b", L, 1, 0.0);
    w(p + "sv_w", L, L, L);
    fill(p + "sv_b", L, 1, 0.0);
    w(p + "so_w", L, L, L);
    fill(p + "so_b", L, 1, 0.0);
    fill(p + "lnf_g", L, 1, 1.0);
    fill(p + "lnf_b", L, 1, 0.0);
    w(p + "ffn_w1", 2 * L, L, L);
    fill(p + "ffn_b1", 2 * L, 1, 0.0);
    w(p + "ffn_w2", L, 2 * L, 2 * L);
    fill(p + "ffn_b2", L, 1, 0.0);
  }

  w("head.cls_w", K, L, L);
  fill("head.cls_b", K, 1, 0.0);
  w("head.me_w1", L, L, L);
  fill("head.me_b1", L, 1, 0.0);
  w("head.me_w2", D, L, L);
  fill("head.me_b2", D, 1, 0.0);

  small("prompt.p", C, M);

  fill("hgen.bn_g", Dv, 1, 1.0);
  fill("hgen.bn_b", Dv, 1, 0.0);
  w("hgen.w1", Hh, Dv, Dv);
  fill("hgen.b1", Hh, 1, 0.0);
  w("hgen.w2", C, Hh, Hh);
  fill("hgen.b2", C, 1, 0.0);

  w("proj.vl_w", C, Dv, Dv);
  fill("proj.vl_b", C, 1, 0.0);

  store.buffers["hgen.bn_mean"] = Mat::Zero(Dv, 1);
  store.buffers["hgen.bn_var"] = Mat::Ones(Dv, 1);

  // Frozen snapshot of the image encoder, taken before any training.
  for (const auto& [name, v] : store.params)
    if (name.rfind("enc.", 0) == 0) store.frozen["venc0." + name] = v->value;

  // Frozen text encoder.
  Rng rt(static_cast<std::uint64_t>(cfg.text_seed));
  store.frozen["tenc.class_embed"] = rt.normal_mat(C, K, 1.0);
  store.frozen["tenc.wt1"] =
      rt.normal_mat(M + 1, M + 1, 1.0 / std::sqrt(static_cast<Scalar>(M + 1)));
  store.frozen["tenc.wc1"] =
      rt.normal_mat(C, C, 1.0 / std::sqrt(static_cast<Scalar>(C)));
  store.frozen["tenc.bc1"] = rt.normal_mat(C, 1, 0.05);
  store.frozen["tenc.wt2"] =
      rt.normal_mat(M + 1, M + 1, 1.0 / std::sqrt(static_cast<Scalar>(M + 1)));
  store.frozen["tenc.wc2"] =
      rt.normal_mat(C, C, 1.0 / std::sqrt(static_cast<Scalar>(C)));
  store.frozen["tenc.bc2"] = rt.normal_mat(C, 1, 0.05);
  store.frozen["tenc.wout"] =
      rt.normal_mat(C, C, 1.0 / std::sqrt(static_cast<Scalar>(C)));
  store.frozen["tenc.bout"] = rt.normal_mat(C, 1, 0.05);
  store.frozen["tenc.template_prompt"] = rt.normal_mat(C, M, 0.02);
  store.frozen["tenc.pos"] = sinusoidal_1d(C, M + 1);

  const Var t0 =
      encode_text(*this, ag::constant(store.frozen_at("tenc.template_prompt")));
  template_text = t0->value;
  for (Index k = 0; k < template_text.cols(); ++k) {
    const Scalar n = template_text.col(k).norm();
    if (n <= 0.0)
      throw std::runtime_error("template text feature has zero norm");
    template_text.col(k) /= n;
  }
}

Mat patchify(const Image& img, int ps) {
  const Index H = img.height(), W = img.width();
  if (ps < 1 || H % ps != 0 || W % ps != 0)
    throw std::invalid_argument(
        "encode_image: image " + std::to_string(H) + "x" + std::to_string(W) +
        " not divisible by patch_size " + std::to_string(ps));
  const Index gh = H / ps, gw = W / ps;
  Mat X(3 * ps * ps, gh * gw);
  for (Index py = 0; py < gh; ++py)
    for (Index px = 0; px < gw; ++px) {
      const Index p = py * gw + px;
      for (int ch = 0; ch < 3; ++ch)
        for (Index iy = 0; iy < ps; ++iy)
          for (Index ix = 0; ix < ps; ++ix)
            X(ch * ps * ps + iy * ps + ix, p) =
                img.c[static_cast<std::size_t>(ch)](py * ps + iy, px * ps + ix);
    }
  return X;
}

namespace {

using Getter = std::function<Var(const std::string&)>;

Var layernorm_p(const Getter& g, const std::string& prefix,
                const std::string& name, const Var& x) {
  return ag::layernorm_cols(x, g(prefix + name + "_g"), g(prefix + name + "_b"));
}

Var self_attention(const Getter& g, const std::string& p, const Var& tokens) {
  const Var tn = layernorm_p(g, p, "ln1", tokens);
  const Var q = ag::add_colvec(ag::matmul(g(p + "wq"), tn), g(p + "bq"));
  const Var k = ag::add_colvec(ag::matmul(g(p + "wk"), tn), g(p + "bk"));
  const Var v = ag::add_colvec(ag::matmul(g(p + "wv"), tn), g(p + "bv"));
  const Scalar d = static_cast<Scalar>(q->value.rows());
  const Var a = ag::softmax_cols(
      ag::scale(ag::matmul(ag::transpose(k), q), 1.0 / std::sqrt(d)));
  return ag::add(tokens, ag::add_colvec(ag::matmul(g(p + "wo"),
                                                   ag::matmul(v, a)),
                                        g(p + "bo")));
}

Var mlp_block(const Getter& g, const std::string& p, const Var& tokens) {
  const Var tn = layernorm_p(g, p, "ln2", tokens);
  const Var h = ag::gelu(
      ag::add_colvec(ag::matmul(g(p + "mlp_w1"), tn), g(p + "mlp_b1")));
  return ag::add(tokens, ag::add_colvec(ag::matmul(g(p + "mlp_w2"), h),
                                        g(p + "mlp_b2")));
}

struct EncodeOut {
  Var patch;
  Var cls;
  int grid_h;
  int grid_w;
};

EncodeOut encode_image_impl(SegModel& model, const Image& img,
                            const Getter& g) {
  const int ps = model.cfg.patch_size;
  const Mat X = patchify(img, ps);
  const int gh = static_cast<int>(img.height()) / ps;
  const int gw = static_cast<int>(img.width()) / ps;
  Var tok = ag::add_colvec(ag::matmul(g("enc.patch_w"), ag::constant(X)),
                           g("enc.patch_b"));
  tok = ag::add(tok, ag::constant(model.patch_pos(gh, gw)));
  Var T = ag::concat_cols({g("enc.cls"), tok});
  for (int i = 0; i < model.cfg.enc_blocks; ++i) {
    const std::string p = "enc.b" + std::to_string(i) + ".";
    T = self_attention(g, p, T);
    T = mlp_block(g, p, T);
  }
  T = ag::layernorm_cols(T, g("enc.lnf_g"), g("enc.lnf_b"));
  EncodeOut out;
  out.cls = ag::slice_cols(T, 0, 1);
  out.patch = ag::slice_cols(T, 1, gh * gw);
  out.grid_h = gh;
  out.grid_w = gw;
  return out;
}

}  // namespace

ImageFeatures encode_image(SegModel& model, const Image& img) {
  const Getter g = [&model](const std::string& name) {
    return model.store.at(name);
  };
  const EncodeOut eo = encode_image_impl(model, img, g);
  return {eo.patch, eo.cls, eo.grid_h, eo.grid_w};
}

FrozenFeatures encode_image_frozen(SegModel& model, const Image& img) {
  const Getter g = [&model](const std::string& name) {
    return ag::constant(model.store.frozen_at("venc0." + name));
  };
  const EncodeOut eo = encode_image_impl(model, img, g);
  FrozenFeatures f;
  f.patch = eo.patch->value;
  f.cls = eo.cls->value;
  f.grid_h = eo.grid_h;
  f.grid_w = eo.grid_w;
  return f;
}

ag::Var encode_text(SegModel& model, const ag::Var& prompt) {
  const int C = model.cfg.dim_tok, M = model.cfg.context_tokens,
            K = model.cfg.num_classes;
  if (prompt->value.rows() != C || prompt->value.cols() != M)
    throw std::invalid_argument(
        "encode_text: prompt must be (" + std::to_string(C) + " x " +
        std::to_string(M) + "), got (" + std::to_string(prompt->value.rows()) +
        " x " + std::to_string(prompt->value.cols()) + ")");
  const int T = M + 1;
  const Mat& class_embed = model.store.frozen_at("tenc.class_embed");
  const Mat& pos = model.store.frozen_at("tenc.pos");

  std::vector<Var> parts;
  parts.reserve(static_cast<std::size_t>(2 * K));
  for (int k = 0; k < K; ++k) {
    parts.push_back(prompt);
    parts.push_back(ag::constant(class_embed.col(k)));
  }
  Var X = ag::concat_cols(parts);
  Mat pos_tiled(C, K * T);
  for (int k = 0; k < K; ++k) pos_tiled.middleCols(k * T, T) = pos;
  X = ag::add(X, ag::constant(pos_tiled));

  auto block_diag = [&](const Mat& wt) {
    Mat big = Mat::Zero(K * T, K * T);
    for (int k = 0; k < K; ++k) big.block(k * T, k * T, T, T) = wt;
    return big;
  };
  for (const std::string layer : {"1", "2"}) {
    const Var mixed = ag::gelu(ag::matmul(
        X, ag::constant(block_diag(model.store.frozen_at("tenc.wt" + layer)))));
    X = ag::add(X, mixed);
    const Var ch = ag::gelu(ag::add_colvec(
        ag::matmul(ag::constant(model.store.frozen_at("tenc.wc" + layer)), X),
        ag::constant(model.store.frozen_at("tenc.bc" + layer))));
    X = ag::add(X, ch);
  }
  Mat sel = Mat::Zero(K * T, K);
  for (int k = 0; k < K; ++k) sel(k * T + T - 1, k) = 1.0;
  const Var t_last = ag::matmul(X, ag::constant(sel));
  return ag::add_colvec(
      ag::matmul(ag::constant(model.store.frozen_at("tenc.wout")), t_last),
      ag::constant(model.store.frozen_at("tenc.bout")));
}

ag::Var query_init(SegModel& model, const ag::Var& text) {
  auto& s = model.store;
  const Var h = ag::gelu(
      ag::add_colvec(ag::matmul(s.at("qproj.w1"), text), s.at("qproj.b1")));
  return ag::add_colvec(ag::matmul(s.at("qproj.w2"), h), s.at("qproj.b2"));
}

PixelFeatures pixel_decode(SegModel& model, const ImageFeatures& feats,
                           const ag::Var& text, const Image& img) {
  auto& s = model.store;
  const int H = static_cast<int>(img.height());
  const int W = static_cast<int>(img.width());
  const Scalar d = static_cast<Scalar>(model.cfg.dim_pix);

  const Var z0 = ag::add_colvec(ag::matmul(s.at("pix.in_w"), feats.patch),
                                s.at("pix.in_b"));
  const Var q = ag::add_colvec(ag::matmul(s.at("pix.q_w"), z0), s.at("pix.q_b"));
  const Var k =
      ag::add_colvec(ag::matmul(s.at("pix.k_w"), text), s.at("pix.k_b"));
  const Var v =
      ag::add_colvec(ag::matmul(s.at("pix.v_w"), text), s.at("pix.v_b"));
  const Var a = ag::softmax_cols(
      ag::scale(ag::matmul(ag::transpose(k), q), 1.0 / std::sqrt(d)));
  const Var z1 =
      ag::add(z0, ag::add_colvec(ag::matmul(s.at("pix.o_w"), ag::matmul(v, a)),
                                 s.at("pix.o_b")));
  PixelFeatures pix;
  pix.z_patch = ag::layernorm_cols(z1, s.at("pix.ln_g"), s.at("pix.ln_b"));
  pix.height = H;
  pix.width = W;

  const Var up = ag::gather_cols(
      pix.z_patch, model.upsample_plan(feats.grid_h, feats.grid_w, H, W));
  Mat feat7(7, static_cast<Index>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const Index j = static_cast<Index>(y) * W + x;
      feat7(0, j) = img.c[0](y, x);
      feat7(1, j) = img.c[1](y, x);
      feat7(2, j) = img.c[2](y, x);
      feat7(3, j) = std::sin(2.0 * M_PI * x / W);
      feat7(4, j) = std::cos(2.0 * M_PI * x / W);
      feat7(5, j) = std::sin(2.0 * M_PI * y / H);
      feat7(6, j) = std::cos(2.0 * M_PI * y / H);
    }
  const Var stem = ag::add_colvec(
      ag::matmul(s.at("pix.stem_w"), ag::constant(feat7)), s.at("pix.stem_b"));
  pix.z_full = ag::add(up, stem);
  return pix;
}

Mat attention_mask_from_logits(const Mat& prev_patch_logits) {
  // prev_patch_logits is (N_q, P); the mask is (P, N_q).
  const Index nq = prev_patch_logits.rows();
  const Index p = prev_patch_logits.cols();
  Mat mask = Mat::Zero(p, nq);
  for (Index q = 0; q < nq; ++q) {
    bool any = false;
    for (Index i = 0; i < p; ++i)
      if (prev_patch_logits(q, i) > 0.0) {
        mask(i, q) = 1.0;
        any = true;
      }
    if (!any) mask.col(q).setOnes();
  }
  return mask;
}

ag::Var masked_cross_attention(SegModel& model, int block,
                               const ag::Var& queries, const ag::Var& z_patch,
                               const Mat& attn_mask) {
  if (block < 0 || block >= model.cfg.dec_blocks)
    throw std::invalid_argument("decode_block: block index out of range");
  auto& s = model.store;
  const std::string p = "dec.b" + std::to_string(block) + ".";
  const Scalar d = static_cast<Scalar>(model.cfg.dim_query);

  const Var qn =
      ag::layernorm_cols(queries, s.at(p + "lnc_g"), s.at(p + "lnc_b"));
  const Var qq =
      ag::add_colvec(ag::matmul(s.at(p + "cq_w"), qn), s.at(p + "cq_b"));
  const Var kk =
      ag::add_colvec(ag::matmul(s.at(p + "ck_w"), z_patch), s.at(p + "ck_b"));
  const Var vv =
      ag::add_colvec(ag::matmul(s.at(p + "cv_w"), z_patch), s.at(p + "cv_b"));
  const Var scores =
      ag::scale(ag::matmul(ag::transpose(kk), qq), 1.0 / std::sqrt(d));
  const Var a = ag::masked_softmax_cols(scores, attn_mask);
  return ag::add(queries, ag::add_colvec(ag::matmul(s.at(p + "co_w"),
                                                    ag::matmul(vv, a)),
                                         s.at(p + "co_b")));
}

ag::Var decode_block(SegModel& model, int block, const ag::Var& queries,
                     const ag::Var& z_patch, const Mat& attn_mask) {
  auto& s = model.store;
  const std::string p = "dec.b" + std::to_string(block) + ".";
  const Scalar d = static_cast<Scalar>(model.cfg.dim_query);

  Var q = masked_cross_attention(model, block, queries, z_patch, attn_mask);
  {
    const Var qn = ag::layernorm_cols(q, s.at(p + "lns_g"), s.at(p + "lns_b"));
    const Var qq =
        ag::add_colvec(ag::matmul(s.at(p + "sq_w"), qn), s.at(p + "sq_b"));
    const Var kk =
        ag::add_colvec(ag::matmul(s.at(p + "sk_w"), qn), s.at(p + "sk_b"));
    const Var vv =
        ag::add_colvec(ag::matmul(s.at(p + "sv_w"), qn), s.at(p + "sv_b"));
    const Var a = ag::softmax_cols(
        ag::scale(ag::matmul(ag::transpose(kk), qq), 1.0 / std::sqrt(d)));
    q = ag::add(q, ag::add_colvec(ag::matmul(s.at(p + "so_w"),
                                             ag::matmul(vv, a)),
                                  s.at(p + "so_b")));
  }
  {
    const Var qn = ag::layernorm_cols(q, s.at(p + "lnf_g"), s.at(p + "lnf_b"));
    const Var h = ag::gelu(
        ag::add_colvec(ag::matmul(s.at(p + "ffn_w1"), qn), s.at(p + "ffn_b1")));
    q = ag::add(q, ag::add_colvec(ag::matmul(s.at(p + "ffn_w2"), h),
                                  s.at(p + "ffn_b2")));
  }
  return q;
}

DecoderTrace transformer_decode(SegModel& model, const PixelFeatures& pix,
                                const ag::Var& q0) {
  auto& s = model.store;
  const Index nq = q0->value.cols();
  const Index np = pix.z_patch->value.cols();
  DecoderTrace trace;
  trace.height = pix.height;
  trace.width = pix.width;

  Var q = q0;
  Mat mask = Mat::Ones(np, nq);
  for (int b = 0; b < model.cfg.dec_blocks; ++b) {
    if (b > 0)
      mask = attention_mask_from_logits(
          trace.blocks.back().mask_logits_patch->value);
    q = decode_block(model, b, q, pix.z_patch, mask);

    DecoderBlockOut out;
    out.queries = q;
    out.attn_mask = mask;
    out.class_logits =
        ag::add_colvec(ag::matmul(s.at("head.cls_w"), q), s.at("head.cls_b"));
    const Var h = ag::gelu(
        ag::add_colvec(ag::matmul(s.at("head.me_w1"), q), s.at("head.me_b1")));
    out.mask_embed = ag::add_colvec(ag::matmul(s.at("head.me_w2"), h),
                                    s.at("head.me_b2"));
    out.mask_logits_patch =
        ag::matmul(ag::transpose(out.mask_embed), pix.z_patch);
    out.mask_logits_full =
        ag::matmul(ag::transpose(out.mask_embed), pix.z_full);
    trace.blocks.push_back(out);
  }
  return trace;
}

ag::Var assemble_semantic_map(const DecoderTrace& trace, int block) {
  const int S = static_cast<int>(trace.blocks.size());
  if (block < 1 || block > S)
    throw std::invalid_argument(
        "assemble_semantic_map: block " + std::to_string(block) +
        " out of range [1, " + std::to_string(S) + "]");
  const auto& b = trace.blocks[static_cast<std::size_t>(block - 1)];
  const ag::Var probs = ag::softmax_cols(b.class_logits);
  const ag::Var masks = ag::sigmoid(b.mask_logits_full);
  return ag::matmul(probs, masks);
}

LabelMap predict_labels(const DecoderTrace& trace) {
  const ag::Var y =
      assemble_semantic_map(trace, static_cast<int>(trace.blocks.size()));
  LabelMap out(trace.height, trace.width);
  for (int yy = 0; yy < trace.height; ++yy)
    for (int xx = 0; xx < trace.width; ++xx) {
      Index best = 0;
      y->value.col(static_cast<Index>(yy) * trace.width + xx).maxCoeff(&best);
      out(yy, xx) = static_cast<int>(best);
    }
  return out;
}

}  // namespace dgseg::segnet
