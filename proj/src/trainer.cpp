#include "dgseg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "dgseg/prompts.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/serialize.hpp"

namespace dgseg::trainer {

namespace fs = std::filesystem;
using ag::Var;

namespace {
constexpr char kCheckpointMagic[] = "dgseg-checkpoint-v1";
}

TrainConfig TrainConfig::from_config(const Config& cfg) {
  TrainConfig t;
  t.iterations = cfg.get_int("train.iterations", t.iterations);
  t.batch = static_cast<int>(cfg.get_int("train.batch", t.batch));
  t.base_lr = cfg.get_real("train.base_lr", t.base_lr);
  t.warmup_iters = cfg.get_int("train.warmup_iters", t.warmup_iters);
  t.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed",
                                                  static_cast<std::int64_t>(t.seed)));
  t.weight_decay = cfg.get_real("train.weight_decay", t.weight_decay);
  t.checkpoint_every = cfg.get_int("train.checkpoint_every", t.checkpoint_every);
  t.use_perturb = cfg.get_bool("train.use_perturb", t.use_perturb);
  t.use_cons = cfg.get_bool("train.use_cons", t.use_cons);
  t.use_contra = cfg.get_bool("train.use_contra", t.use_contra);
  t.seg_on_aug = cfg.get_bool("train.seg_on_aug", t.seg_on_aug);
  t.manifest_path = cfg.get_str("train.manifest", t.manifest_path);
  t.checkpoint_dir = cfg.get_str("train.checkpoint_dir", t.checkpoint_dir);
  t.weights = losses::LossWeights::from_config(cfg);
  t.ranges = perturb::PerturbRanges::from_config(cfg);
  t.model = segnet::ModelConfig::from_config(cfg);
  t.config_hash = cfg.hash();
  t.validate();
  return t;
}

void TrainConfig::validate() const {
  if (iterations < 0)
    throw std::invalid_argument("train.iterations must be >= 0");
  if (batch < 2) throw std::invalid_argument("train.batch must be >= 2");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    throw std::invalid_argument("train.base_lr must be > 0");
  if (warmup_iters < 0 || warmup_iters > iterations)
    throw std::invalid_argument(
        "train.warmup_iters must be in [0, train.iterations]");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw std::invalid_argument("train.weight_decay must be >= 0");
  if (checkpoint_every < 1)
    throw std::invalid_argument("train.checkpoint_every must be >= 1");
  if (manifest_path.empty())
    throw std::invalid_argument("train.manifest must be set");
  if (use_cons && !use_perturb)
    throw std::invalid_argument("train.use_cons requires train.use_perturb");
  if (use_contra && !use_perturb)
    throw std::invalid_argument("train.use_contra requires train.use_perturb");
  weights.validate();
  perturb::validate_ranges(ranges);
  model.validate();
}

Scalar lr_at(std::int64_t iter, const TrainConfig& cfg) {
  if (iter < 0) throw std::invalid_argument("lr_at: iter must be >= 0");
  if (cfg.warmup_iters <= 0 || iter >= cfg.warmup_iters) return cfg.base_lr;
  return cfg.base_lr * static_cast<Scalar>(iter) /
         static_cast<Scalar>(cfg.warmup_iters);
}

void Optimizer::step(segnet::ParamStore& store, Scalar lr) {
  ++t;
  const Scalar bc1 = 1.0 - std::pow(beta1, static_cast<Scalar>(t));
  const Scalar bc2 = 1.0 - std::pow(beta2, static_cast<Scalar>(t));
  for (auto& [name, node] : store.params) {
    auto [it, inserted] = slots.try_emplace(name);
    AdamSlot& slot = it->second;
    if (inserted) {
      slot.m = Mat::Zero(node->value.rows(), node->value.cols());
      slot.v = Mat::Zero(node->value.rows(), node->value.cols());
    }
    const Mat g = node->grad_ready
                      ? node->grad
                      : Mat::Zero(node->value.rows(), node->value.cols());
    slot.m = beta1 * slot.m + (1.0 - beta1) * g;
    slot.v.array() = beta2 * slot.v.array() + (1.0 - beta2) * g.array().square();
    node->value.array() -=
        lr * ((slot.m.array() / bc1) /
                  ((slot.v.array() / bc2).sqrt() + eps) +
              weight_decay * node->value.array());
  }
}

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  manifest_ = scenegen::load_manifest(cfg_.manifest_path);
  if (manifest_.num_classes != cfg_.model.num_classes)
    throw std::invalid_argument(
        "manifest has K=" + std::to_string(manifest_.num_classes) +
        " but model.num_classes=" + std::to_string(cfg_.model.num_classes));
  train_records_ = scenegen::split_records(manifest_, "train");
  if (train_records_.empty())
    throw std::invalid_argument("manifest has no train records");
  train_samples_.reserve(train_records_.size());
  for (const auto& rec : train_records_)
    train_samples_.push_back(scenegen::load_record(manifest_, rec));
  frozen_cache_.resize(train_records_.size());
  model_ = std::make_unique<segnet::SegModel>(cfg_.model);
  opt_.weight_decay = cfg_.weight_decay;
}

std::vector<int> Trainer::next_batch_indices() {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(cfg_.batch));
  while (out.size() < static_cast<std::size_t>(cfg_.batch)) {
    if (order_pos_ >= order_.size()) {
      order_ = scenegen::shuffled_indices(
          static_cast<int>(train_records_.size()),
          mix_seed(cfg_.seed, 500009ULL + static_cast<std::uint64_t>(epoch_)));
      order_pos_ = 0;
      ++epoch_;
    }
    out.push_back(order_[order_pos_++]);
  }
  return out;
}

const segnet::FrozenFeatures& Trainer::frozen_features(int record_idx) {
  auto& slot = frozen_cache_[static_cast<std::size_t>(record_idx)];
  if (!slot)
    slot = std::make_unique<segnet::FrozenFeatures>(segnet::encode_image_frozen(
        *model_, train_samples_[static_cast<std::size_t>(record_idx)].image));
  return *slot;
}

LossBreakdown Trainer::step() {
  const std::vector<int> idx = next_batch_indices();
  const int b = cfg_.batch;
  const bool aug_on = cfg_.use_perturb;
  const int n_samples = aug_on ? 2 * b : b;
  auto& model = *model_;

  std::vector<const Image*> images(static_cast<std::size_t>(n_samples));
  std::vector<const LabelMap*> labels(static_cast<std::size_t>(n_samples));
  std::vector<LabeledImage> augmented;
  augmented.reserve(static_cast<std::size_t>(b));
  for (int s = 0; s < b; ++s) {
    const auto& sample = train_samples_[static_cast<std::size_t>(idx[s])];
    images[static_cast<std::size_t>(s)] = &sample.image;
    labels[static_cast<std::size_t>(s)] = &sample.labels;
  }
  if (aug_on) {
    for (int s = 0; s < b; ++s) {
      const auto& sample = train_samples_[static_cast<std::size_t>(idx[s])];
      const auto p = perturb::sample_perturbation(
          mix_seed(cfg_.seed, 0xA5F152E7ULL +
                                  static_cast<std::uint64_t>(iter_) * 8191ULL +
                                  static_cast<std::uint64_t>(s)),
          cfg_.ranges);
      augmented.push_back(perturb::apply_perturbation(sample, p));
      images[static_cast<std::size_t>(b + s)] = &augmented.back().image;
      labels[static_cast<std::size_t>(b + s)] = &augmented.back().labels;
    }
  }

  // Frozen class tokens for every sample; originals come from the cache.
  Mat cls_tokens(cfg_.model.dim_v, n_samples);
  std::vector<Mat> frozen_cls(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < b; ++s) {
    frozen_cls[static_cast<std::size_t>(s)] = frozen_features(idx[s]).cls;
    cls_tokens.col(s) = frozen_cls[static_cast<std::size_t>(s)].col(0);
  }
  if (aug_on)
    for (int s = 0; s < b; ++s) {
      const auto f = segnet::encode_image_frozen(model, *images[b + s]);
      frozen_cls[static_cast<std::size_t>(b + s)] = f.cls;
      cls_tokens.col(b + s) = f.cls.col(0);
    }

  const bool adaptive = cfg_.model.domain_aware && !cfg_.model.clamp_pi;
  const Var pi_all = prompts::domain_embeddings(model, cls_tokens,
                                                /*training=*/true);
  Var shared_text;
  if (!adaptive)
    shared_text = segnet::encode_text(
        model, prompts::compose_prompt(model, ag::slice_cols(pi_all, 0, 1)));

  Var seg_sum, reg_l_sum, reg_vl_sum, reg_v_sum, cons_sum;
  int n_seg = 0;
  std::vector<segnet::DecoderTrace> traces;
  traces.reserve(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    const Var text =
        adaptive ? segnet::encode_text(
                       model, prompts::compose_prompt(
                                  model, ag::slice_cols(pi_all, s, 1)))
                 : shared_text;
    const segnet::ImageFeatures feats = segnet::encode_image(model, *images[s]);
    const segnet::PixelFeatures pix =
        segnet::pixel_decode(model, feats, text, *images[s]);
    const Var q0 = segnet::query_init(model, text);
    traces.push_back(segnet::transformer_decode(model, pix, q0));

    if (s < b || cfg_.seg_on_aug) {
      const Var ls = losses::segmentation_loss(traces.back(), *labels[s],
                                               cfg_.weights);
      seg_sum = seg_sum ? ag::add(seg_sum, ls) : ls;
      ++n_seg;
    }
    const Var rl = losses::reg_language(text, model.template_text);
    const Var rvl = losses::reg_vision_language(model, feats, text, *labels[s],
                                                cfg_.weights.tau_vl);
    const Var rv = losses::reg_vision(
        feats.cls, frozen_cls[static_cast<std::size_t>(s)]);
    reg_l_sum = reg_l_sum ? ag::add(reg_l_sum, rl) : rl;
    reg_vl_sum = reg_vl_sum ? ag::add(reg_vl_sum, rvl) : rvl;
    reg_v_sum = reg_v_sum ? ag::add(reg_v_sum, rv) : rv;
  }

  losses::LossComponents comp;
  comp.seg = ag::scale(seg_sum, 1.0 / static_cast<Scalar>(n_seg));
  const Scalar inv_n = 1.0 / static_cast<Scalar>(n_samples);
  comp.reg_language = ag::scale(reg_l_sum, inv_n);
  comp.reg_vision_language = ag::scale(reg_vl_sum, inv_n);
  comp.reg_vision = ag::scale(reg_v_sum, inv_n);

  if (cfg_.use_contra) {
    std::vector<losses::SampleTag> tags(static_cast<std::size_t>(n_samples),
                                        losses::SampleTag::original);
    for (int s = b; s < n_samples; ++s)
      tags[static_cast<std::size_t>(s)] = losses::SampleTag::augmented;
    comp.contra = losses::contrastive_loss(
        pi_all, losses::partition_batch(tags, b), cfg_.weights.tau);
  }
  if (cfg_.use_cons) {
    for (int s = 0; s < b; ++s) {
      const Var lc = losses::consistency_loss(
          traces[static_cast<std::size_t>(s)],
          traces[static_cast<std::size_t>(b + s)], cfg_.weights);
      cons_sum = cons_sum ? ag::add(cons_sum, lc) : lc;
    }
    comp.cons = ag::scale(cons_sum, 1.0 / static_cast<Scalar>(b));
  }

  LossBreakdown out;
  out.seg = comp.seg->value(0, 0);
  out.reg = comp.reg_language->value(0, 0) +
            comp.reg_vision_language->value(0, 0) +
            comp.reg_vision->value(0, 0);
  out.contra = comp.contra ? comp.contra->value(0, 0) : 0.0;
  out.cons = comp.cons ? comp.cons->value(0, 0) : 0.0;
  if (!std::isfinite(out.seg) || !std::isfinite(out.reg) ||
      !std::isfinite(out.contra) || !std::isfinite(out.cons)) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "train_step: non-finite loss at iteration %lld "
                  "(L_seg=%g, L_reg=%g, L_contra=%g, L_cons=%g)",
                  static_cast<long long>(iter_), out.seg, out.reg, out.contra,
                  out.cons);
    throw std::runtime_error(buf);
  }

  const Var total = losses::total_loss(comp, cfg_.weights);
  out.total = total->value(0, 0);

  model.store.zero_grads();
  ag::backward(total);
  opt_.step(model.store, lr_at(iter_, cfg_));
  prompts::update_bn_stats(model, cls_tokens);
  ++iter_;
  return out;
}

void Trainer::fit() {
  std::error_code ec;
  fs::create_directories(cfg_.checkpoint_dir, ec);
  if (ec)
    throw std::runtime_error("cannot create checkpoint dir " +
                             cfg_.checkpoint_dir + ": " + ec.message());
  const std::string metrics_path = cfg_.checkpoint_dir + "/metrics.csv";
  std::ofstream metrics(metrics_path);
  if (!metrics)
    throw std::runtime_error("cannot write metrics log: " + metrics_path);
  metrics << "iter,lr,L_seg,L_reg,L_contra,L_cons,L_total\n";

  while (iter_ < cfg_.iterations) {
    const Scalar lr = lr_at(iter_, cfg_);
    const std::int64_t logged_iter = iter_;
    const LossBreakdown lb = step();
    char row[320];
    std::snprintf(row, sizeof(row), "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(logged_iter), lr, lb.seg, lb.reg,
                  lb.contra, lb.cons, lb.total);
    metrics << row;
    if (iter_ % cfg_.checkpoint_every == 0 && iter_ < cfg_.iterations)
      save_checkpoint(cfg_.checkpoint_dir + "/ckpt_" + std::to_string(iter_) +
                          ".bin",
                      *model_, opt_, iter_, cfg_.config_hash);
  }
  metrics.close();
  if (!metrics)
    throw std::runtime_error("metrics log write failed: " + metrics_path);
  save_checkpoint(cfg_.checkpoint_dir + "/ckpt_final.bin", *model_, opt_,
                  iter_, cfg_.config_hash);
}

void save_checkpoint(const std::string& path, const segnet::SegModel& model,
                     const Optimizer& opt, std::int64_t iteration,
                     std::uint64_t config_hash) {
  BinWriter w(path);
  w.str(kCheckpointMagic);
  w.u64(config_hash);
  w.i64(iteration);

  const auto& c = model.cfg;
  w.i64(c.num_classes);
  w.i64(c.patch_size);
  w.i64(c.dim_v);
  w.i64(c.dim_pix);
  w.i64(c.dim_tok);
  w.i64(c.dim_query);
  w.i64(c.context_tokens);
  w.i64(c.enc_blocks);
  w.i64(c.dec_blocks);
  w.i64(c.hgen_hidden);
  w.i64(c.init_seed);
  w.i64(c.text_seed);
  w.u64(c.domain_aware ? 1 : 0);
  w.u64(c.clamp_pi ? 1 : 0);

  w.u64(model.store.frozen_hash());
  w.u64(model.store.params.size());
  for (const auto& [name, node] : model.store.params) {
    w.str(name);
    w.mat(node->value);
  }
  w.u64(model.store.buffers.size());
  for (const auto& [name, m] : model.store.buffers) {
    w.str(name);
    w.mat(m);
  }
  w.i64(opt.t);
  w.u64(opt.slots.size());
  for (const auto& [name, slot] : opt.slots) {
    w.str(name);
    w.mat(slot.m);
    w.mat(slot.v);
  }
  w.close();
}

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 std::uint64_t expected_config_hash,
                                 bool force) {
  BinReader r(path);
  if (r.str() != kCheckpointMagic)
    throw std::runtime_error("not a checkpoint file: " + path);
  LoadedCheckpoint out;
  out.config_hash = r.u64();
  if (expected_config_hash != 0 && out.config_hash != expected_config_hash &&
      !force)
    throw std::runtime_error("checkpoint config hash mismatch: " + path);
  out.iteration = r.i64();

  segnet::ModelConfig c;
  c.num_classes = static_cast<int>(r.i64());
  c.patch_size = static_cast<int>(r.i64());
  c.dim_v = static_cast<int>(r.i64());
  c.dim_pix = static_cast<int>(r.i64());
  c.dim_tok = static_cast<int>(r.i64());
  c.dim_query = static_cast<int>(r.i64());
  c.context_tokens = static_cast<int>(r.i64());
  c.enc_blocks = static_cast<int>(r.i64());
  c.dec_blocks = static_cast<int>(r.i64());
  c.hgen_hidden = static_cast<int>(r.i64());
  c.init_seed = r.i64();
  c.text_seed = r.i64();
  c.domain_aware = r.u64() != 0;
  c.clamp_pi = r.u64() != 0;
  c.validate();
  out.model = std::make_unique<segnet::SegModel>(c);

  const std::uint64_t frozen_hash = r.u64();
  if (frozen_hash != out.model->store.frozen_hash())
    throw std::runtime_error("checkpoint frozen-parameter hash mismatch: " +
                             path);

  const std::uint64_t n_params = r.u64();
  if (n_params != out.model->store.params.size())
    throw std::runtime_error("checkpoint parameter set mismatch: " + path);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::string name = r.str();
    Mat m = r.mat();
    auto& node = out.model->store.at(name);
    if (m.rows() != node->value.rows() || m.cols() != node->value.cols())
      throw std::runtime_error("checkpoint parameter shape mismatch for " +
                               name + ": " + path);
    node->value = std::move(m);
  }
  const std::uint64_t n_buffers = r.u64();
  if (n_buffers != out.model->store.buffers.size())
    throw std::runtime_error("checkpoint buffer set mismatch: " + path);
  for (std::uint64_t i = 0; i < n_buffers; ++i) {
    const std::string name = r.str();
    out.model->store.buffer_at(name) = r.mat();
  }
  out.opt.t = r.i64();
  const std::uint64_t n_slots = r.u64();
  for (std::uint64_t i = 0; i < n_slots; ++i) {
    const std::string name = r.str();
    AdamSlot slot;
    slot.m = r.mat();
    slot.v = r.mat();
    out.opt.slots.emplace(name, std::move(slot));
  }
  return out;
}

}  // namespace dgseg::trainer
