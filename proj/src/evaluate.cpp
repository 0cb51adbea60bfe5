#include "dgseg/evaluate.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>

#include "dgseg/prompts.hpp"

namespace dgseg::evalcli {

namespace {

segnet::DecoderTrace trace_image(segnet::SegModel& model, const Image& img) {
  const ag::Var text = prompts::domain_aware_text_features(model, img);
  const segnet::ImageFeatures feats = segnet::encode_image(model, img);
  const segnet::PixelFeatures pix =
      segnet::pixel_decode(model, feats, text, img);
  const ag::Var q0 = segnet::query_init(model, text);
  return segnet::transformer_decode(model, pix, q0);
}

std::string fmt(const char* f, Scalar v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

LabelMap infer_labels(segnet::SegModel& model, const Image& img) {
  return segnet::predict_labels(trace_image(model, img));
}

Mat infer_class_probs(segnet::SegModel& model, const Image& img) {
  const segnet::DecoderTrace trace = trace_image(model, img);
  Mat y = segnet::assemble_semantic_map(
              trace, static_cast<int>(trace.blocks.size()))
              ->value;
  for (Index j = 0; j < y.cols(); ++j) {
    const Scalar s = y.col(j).sum();
    if (s > 0.0) y.col(j) /= s;
  }
  return y;
}

EvalReport evaluate_dataset(segnet::SegModel& model,
                            const scenegen::DatasetManifest& manifest,
                            const EvalOptions& options) {
  const int k = model.cfg.num_classes;
  if (manifest.num_classes != k)
    throw std::invalid_argument(
        "evaluate_dataset: checkpoint has K=" + std::to_string(k) +
        " but manifest has K=" + std::to_string(manifest.num_classes));

  std::vector<std::string> domains = options.domains;
  if (domains.empty()) domains = scenegen::val_domains(manifest);
  std::sort(domains.begin(), domains.end());
  if (domains.empty())
    throw std::invalid_argument("evaluate_dataset: manifest has no validation records");

  EvalReport rep;
  rep.num_classes = k;
  std::vector<std::vector<Scalar>> pr_scores(static_cast<std::size_t>(k));
  std::vector<std::vector<std::uint8_t>> pr_gt(static_cast<std::size_t>(k));

  std::string text;
  text += "domain";
  text.append(18 - 6, ' ');
  text += "  n    mIoU";
  for (int c = 0; c < k; ++c) text += "     c" + std::to_string(c);
  text += "\n";
  std::string csv = "domain,n_images,miou";
  for (int c = 0; c < k; ++c) csv += ",iou_c" + std::to_string(c);
  csv += "\n";

  Scalar miou_sum = 0.0;
  for (const std::string& d : domains) {
    const auto records = scenegen::domain_records(manifest, "val", d);
    if (records.empty())
      throw std::invalid_argument(
          "evaluate_dataset: domain " + d + " has no validation records");
    metrics::ConfusionMatrix cm(k);
    for (const auto& rec : records) {
      const LabeledImage sample = scenegen::load_record(manifest, rec);
      if (options.pr) {
        const Mat probs = infer_class_probs(model, sample.image);
        LabelMap pred(sample.labels.rows(), sample.labels.cols());
        for (Index y = 0; y < pred.rows(); ++y)
          for (Index x = 0; x < pred.cols(); ++x) {
            const Index j = y * pred.cols() + x;
            Index best = 0;
            probs.col(j).maxCoeff(&best);
            pred(y, x) = static_cast<int>(best);
            const int g = sample.labels(y, x);
            if (g == kIgnoreLabel) continue;
            for (int c = 0; c < k; ++c) {
              pr_scores[static_cast<std::size_t>(c)].push_back(probs(c, j));
              pr_gt[static_cast<std::size_t>(c)].push_back(g == c ? 1 : 0);
            }
          }
        cm.accumulate(pred, sample.labels);
      } else {
        cm.accumulate(infer_labels(model, sample.image), sample.labels);
      }
    }
    DomainResult dr;
    dr.domain_id = d;
    dr.n_images = static_cast<std::int64_t>(records.size());
    dr.iou = metrics::iou_from_confusion(cm);
    miou_sum += dr.iou.miou;

    std::string row = d;
    row.append(d.size() < 18 ? 18 - d.size() : 1, ' ');
    char nbuf[16];
    std::snprintf(nbuf, sizeof(nbuf), "%3lld", static_cast<long long>(dr.n_images));
    row += nbuf;
    row += "  " + fmt("%.4f", dr.iou.miou);
    csv += d + "," + std::to_string(dr.n_images) + "," + fmt("%.6f", dr.iou.miou);
    for (int c = 0; c < k; ++c) {
      if (dr.iou.defined[static_cast<std::size_t>(c)]) {
        row += " " + fmt("%.4f", dr.iou.iou[static_cast<std::size_t>(c)]);
        csv += "," + fmt("%.6f", dr.iou.iou[static_cast<std::size_t>(c)]);
      } else {
        row += "    n/a";
        csv += ",undefined";
      }
    }
    text += row + "\n";
    csv += "\n";
    rep.domains.push_back(std::move(dr));
  }
  rep.avg_miou = miou_sum / static_cast<Scalar>(rep.domains.size());
  text += "average over " + std::to_string(rep.domains.size()) +
          " domains: mIoU " + fmt("%.4f", rep.avg_miou) + "\n";

  if (options.corruptions) {
    // Domain ids of the form corrupt:<group>:<name> are grouped by family.
    std::map<std::string, std::pair<Scalar, int>> groups;
    for (const auto& dr : rep.domains) {
      const std::string& id = dr.domain_id;
      if (id.rfind("corrupt:", 0) != 0) continue;
      const std::size_t mid = id.find(':', 8);
      if (mid == std::string::npos) continue;
      auto& g = groups[id.substr(8, mid - 8)];
      g.first += dr.iou.miou;
      g.second += 1;
    }
    if (!groups.empty()) {
      text += "\ncorruption groups:\n";
      Scalar gsum = 0.0;
      for (const auto& [name, acc] : groups) {
        const Scalar mean = acc.first / acc.second;
        gsum += mean;
        std::string row = "  " + name;
        row.append(name.size() < 10 ? 10 - name.size() : 1, ' ');
        text += row + fmt("%.4f", mean) + " (" + std::to_string(acc.second) +
                " styles)\n";
      }
      text += "  mean      " +
              fmt("%.4f", gsum / static_cast<Scalar>(groups.size())) + "\n";
    }
  }

  if (options.pr) {
    std::string pr = "class,threshold,precision,recall\n";
    text += "\naverage precision per class:\n";
    for (int c = 0; c < k; ++c) {
      const metrics::PRCurve curve = metrics::pr_curve_and_ap(
          pr_scores[static_cast<std::size_t>(c)],
          pr_gt[static_cast<std::size_t>(c)]);
      if (!curve.defined) {
        text += "  c" + std::to_string(c) + ": n/a (no positive pixels)\n";
        continue;
      }
      text += "  c" + std::to_string(c) + ": " + fmt("%.4f", curve.ap) + "\n";
      for (const auto& pt : curve.points)
        pr += std::to_string(c) + "," + fmt("%.6f", pt.threshold) + "," +
              fmt("%.6f", pt.precision) + "," + fmt("%.6f", pt.recall) + "\n";
    }
    rep.pr_csv = std::move(pr);
  }

  rep.text = std::move(text);
  rep.csv = std::move(csv);
  return rep;
}

}  // namespace dgseg::evalcli
