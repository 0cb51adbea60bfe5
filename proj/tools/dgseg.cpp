#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dgseg/config.hpp"
#include "dgseg/evaluate.hpp"
#include "dgseg/scenegen.hpp"
#include "dgseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace dgseg;

namespace {

int run_gen_data(const std::string& out_dir, std::int64_t seed, int classes,
                 int height, int width, const std::string& layout, int n_train,
                 int n_val, bool corruptions) {
  scenegen::SceneSpec spec;
  spec.seed = seed;
  spec.layout = scenegen::layout_from_string(layout);
  spec.num_classes = classes;
  spec.height = height;
  spec.width = width;

  const auto source = scenegen::toy_source_style(classes);
  scenegen::DatasetManifest m;
  if (corruptions) {
    m = scenegen::generate_corruption_dataset(
        spec, source, scenegen::corruption_styles(classes), n_train, n_val,
        out_dir);
  } else {
    m = scenegen::generate_dataset(spec, source,
                                   scenegen::toy_target_styles(classes),
                                   n_train, n_val, out_dir);
  }
  std::cout << "wrote " << m.records.size() << " records to " << out_dir
            << "/manifest.tsv\n";
  return 0;
}

Config load_config(const std::string& path,
                   const std::vector<std::string>& overrides) {
  Config cfg = Config::from_file(path);
  for (const auto& kv : overrides) cfg.apply_overrides({kv});
  return cfg;
}

int run_train(const std::string& config_path,
              const std::vector<std::string>& overrides) {
  const Config cfg = load_config(config_path, overrides);
  const trainer::TrainConfig tc = trainer::TrainConfig::from_config(cfg);
  trainer::Trainer t(tc);
  t.fit();
  std::cout << "trained " << t.iteration() << " iterations\n"
            << "checkpoint: " << tc.checkpoint_dir << "/ckpt_final.bin\n"
            << "metrics:    " << tc.checkpoint_dir << "/metrics.csv\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& manifest_path,
             bool pr, bool corruptions, const std::string& out_dir) {
  trainer::LoadedCheckpoint ckpt = trainer::load_checkpoint(ckpt_path);
  const auto manifest = scenegen::load_manifest(manifest_path);
  evalcli::EvalOptions opts;
  opts.pr = pr;
  opts.corruptions = corruptions;
  const evalcli::EvalReport rep =
      evalcli::evaluate_dataset(*ckpt.model, manifest, opts);
  std::cout << rep.text;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const std::string csv_path = out_dir + "/eval_report.csv";
  std::ofstream csv(csv_path);
  csv << rep.csv;
  csv.close();
  if (!csv) throw std::runtime_error("cannot write " + csv_path);
  std::cout << "report csv: " << csv_path << "\n";
  if (pr) {
    const std::string pr_path = out_dir + "/eval_pr.csv";
    std::ofstream prf(pr_path);
    prf << rep.pr_csv;
    prf.close();
    if (!prf) throw std::runtime_error("cannot write " + pr_path);
    std::cout << "pr csv:     " << pr_path << "\n";
  }
  return 0;
}

int run_ablate(const std::string& config_path,
               const std::vector<std::string>& overrides) {
  struct Row {
    const char* name;
    bool use_perturb, use_cons, use_contra, domain_aware;
  };
  const Row rows[] = {
      {"baseline", false, false, false, false},
      {"perturb", true, false, false, false},
      {"consistency", true, true, false, false},
      {"full", true, true, true, true},
  };

  const Config base_cfg = load_config(config_path, overrides);
  const std::string base_dir =
      base_cfg.get_str("train.checkpoint_dir", "checkpoints");

  std::string table = "row          perturb cons contra prompts  avg mIoU\n";
  std::string csv = "row,use_perturb,use_cons,use_contra,domain_aware,avg_miou\n";
  for (const Row& row : rows) {
    Config cfg = base_cfg;
    cfg.set("train.use_perturb", row.use_perturb ? "true" : "false");
    cfg.set("train.use_cons", row.use_cons ? "true" : "false");
    cfg.set("train.use_contra", row.use_contra ? "true" : "false");
    cfg.set("model.domain_aware", row.domain_aware ? "true" : "false");
    cfg.set("train.checkpoint_dir", base_dir + "/" + row.name);
    const trainer::TrainConfig tc = trainer::TrainConfig::from_config(cfg);
    trainer::Trainer t(tc);
    t.fit();
    const evalcli::EvalReport rep =
        evalcli::evaluate_dataset(t.model(), t.manifest(), {});

    char line[128];
    std::snprintf(line, sizeof(line), "%-12s %-7s %-4s %-6s %-8s %.4f\n",
                  row.name, row.use_perturb ? "on" : "off",
                  row.use_cons ? "on" : "off", row.use_contra ? "on" : "off",
                  row.domain_aware ? "on" : "off", rep.avg_miou);
    table += line;
    std::snprintf(line, sizeof(line), "%s,%d,%d,%d,%d,%.6f\n", row.name,
                  row.use_perturb, row.use_cons, row.use_contra,
                  row.domain_aware, rep.avg_miou);
    csv += line;
    std::cout << "[" << row.name << "] avg held-out mIoU " << rep.avg_miou
              << "\n";
  }
  std::cout << "\n" << table;
  const std::string csv_path = base_dir + "/ablation.csv";
  std::ofstream out(csv_path);
  out << csv;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + csv_path);
  std::cout << "ablation csv: " << csv_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"domain-generalized segmentation toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a toy dataset");
  std::string out_dir;
  std::int64_t seed = 1234;
  int classes = 5, height = 64, width = 64, n_train = 24, n_val = 8;
  std::string layout = "mixed";
  bool corruptions_out = false;
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "scene seed");
  gen->add_option("--classes", classes, "number of classes");
  gen->add_option("--height", height, "image height");
  gen->add_option("--width", width, "image width");
  gen->add_option("--layout", layout, "bands | blobs | mixed");
  gen->add_option("--n-train", n_train, "training images (source domain)");
  gen->add_option("--n-val", n_val, "validation images per domain");
  gen->add_flag("--corruptions", corruptions_out,
                "validation split uses the corruption styles");

  auto* train = app.add_subcommand("train", "train a model");
  std::string config_path;
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--override", overrides, "key=value override");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path, manifest_path, eval_out = ".";
  bool pr = false, corruptions = false;
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--manifest", manifest_path, "dataset manifest")->required();
  eval->add_flag("--pr", pr, "emit PR curves and AP per class");
  eval->add_flag("--corruptions", corruptions, "group corruption domains");
  eval->add_option("--out", eval_out, "directory for CSV reports");

  auto* ablate = app.add_subcommand("ablate", "run the 4-row ablation");
  std::string ablate_config;
  std::vector<std::string> ablate_overrides;
  ablate->add_option("--config", ablate_config, "config file")->required();
  ablate->add_option("--override", ablate_overrides, "key=value override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return run_gen_data(out_dir, seed, classes, height, width, layout,
                          n_train, n_val, corruptions_out);
    if (train->parsed()) return run_train(config_path, overrides);
    if (eval->parsed())
      return run_eval(ckpt_path, manifest_path, pr, corruptions, eval_out);
    if (ablate->parsed()) return run_ablate(ablate_config, ablate_overrides);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
