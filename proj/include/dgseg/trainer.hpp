#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dgseg/config.hpp"
#include "dgseg/losses.hpp"
#include "dgseg/perturb.hpp"
#include "dgseg/scenegen.hpp"
#include "dgseg/segnet.hpp"
#include "dgseg/types.hpp"

namespace dgseg::trainer {

struct TrainConfig {
  std::int64_t iterations = 2000;
  int batch = 4;
  Scalar base_lr = 1e-3;
  std::int64_t warmup_iters = 100;
  std::uint64_t seed = 7;
  Scalar weight_decay = 0.01;
  std::int64_t checkpoint_every = 1000;
  bool use_perturb = true;
  bool use_cons = true;
  bool use_contra = true;
  bool seg_on_aug = true;
  std::string manifest_path;
  std::string checkpoint_dir = "checkpoints";
  losses::LossWeights weights;
  perturb::PerturbRanges ranges;
  segnet::ModelConfig model;
  std::uint64_t config_hash = 0;

  static TrainConfig from_config(const Config& cfg);
  void validate() const;
};

Scalar lr_at(std::int64_t iter, const TrainConfig& cfg);

struct AdamSlot {
  Mat m;
  Mat v;
};

// Adam with decoupled weight decay; parameters visited in sorted name order.
struct Optimizer {
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
  Scalar weight_decay = 0.01;
  std::int64_t t = 0;
  std::map<std::string, AdamSlot> slots;

  void step(segnet::ParamStore& store, Scalar lr);
};

struct LossBreakdown {
  Scalar seg = 0.0;
  Scalar reg = 0.0;
  Scalar contra = 0.0;
  Scalar cons = 0.0;
  Scalar total = 0.0;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  // Runs one optimizer step on the next batch and advances the iteration
  // counter. Throws with a component breakdown if any loss goes non-finite.
  LossBreakdown step();

  // Runs the remaining iterations, appending one CSV row per step to
  // <checkpoint_dir>/metrics.csv and writing periodic plus final checkpoints.
  void fit();

  segnet::SegModel& model() { return *model_; }
  const segnet::SegModel& model() const { return *model_; }
  Optimizer& optimizer() { return opt_; }
  std::int64_t iteration() const { return iter_; }
  const TrainConfig& config() const { return cfg_; }
  const scenegen::DatasetManifest& manifest() const { return manifest_; }

 private:
  std::vector<int> next_batch_indices();
  const segnet::FrozenFeatures& frozen_features(int record_idx);

  TrainConfig cfg_;
  scenegen::DatasetManifest manifest_;
  std::vector<scenegen::ManifestRecord> train_records_;
  std::vector<LabeledImage> train_samples_;
  std::vector<std::unique_ptr<segnet::FrozenFeatures>> frozen_cache_;
  std::unique_ptr<segnet::SegModel> model_;
  Optimizer opt_;
  std::int64_t iter_ = 0;
  std::int64_t epoch_ = 0;
  std::vector<int> order_;
  std::size_t order_pos_ = 0;
};

void save_checkpoint(const std::string& path, const segnet::SegModel& model,
                     const Optimizer& opt, std::int64_t iteration,
                     std::uint64_t config_hash);

struct LoadedCheckpoint {
  std::unique_ptr<segnet::SegModel> model;
  Optimizer opt;
  std::int64_t iteration = 0;
  std::uint64_t config_hash = 0;
};

// expected_config_hash == 0 skips the hash comparison; force overrides a
// mismatch.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 std::uint64_t expected_config_hash = 0,
                                 bool force = false);

}  // namespace dgseg::trainer
