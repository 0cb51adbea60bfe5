#pragma once

#include <string>
#include <vector>

#include "dgseg/metrics.hpp"
#include "dgseg/scenegen.hpp"
#include "dgseg/segnet.hpp"
#include "dgseg/types.hpp"

namespace dgseg::evalcli {

struct EvalOptions {
  bool pr = false;
  bool corruptions = false;
  // Evaluate only these validation domains; empty means all.
  std::vector<std::string> domains;
};

struct DomainResult {
  std::string domain_id;
  std::int64_t n_images = 0;
  metrics::IouReport iou;
};

struct EvalReport {
  int num_classes = 0;
  std::vector<DomainResult> domains;
  Scalar avg_miou = 0.0;
  std::string text;     // human-readable tables
  std::string csv;      // domain,miou,iou_c0,...
  std::string pr_csv;   // class,threshold,precision,recall (with --pr)
};

// Eval-mode forward pass (running normalization statistics).
LabelMap infer_labels(segnet::SegModel& model, const Image& img);

// Per-pixel class scores, columns normalized to sum to one: (K, H*W).
Mat infer_class_probs(segnet::SegModel& model, const Image& img);

EvalReport evaluate_dataset(segnet::SegModel& model,
                            const scenegen::DatasetManifest& manifest,
                            const EvalOptions& options);

}  // namespace dgseg::evalcli
