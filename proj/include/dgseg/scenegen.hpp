#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dgseg/image.hpp"
#include "dgseg/types.hpp"

namespace dgseg::scenegen {

enum class Layout { bands, blobs, mixed };

Layout layout_from_string(const std::string& s);
std::string layout_to_string(Layout l);

// Geometry of one scene: the label map is a pure function of this.
struct SceneSpec {
  std::int64_t seed = 0;
  Layout layout = Layout::bands;
  int num_classes = 5;
  int height = 64;
  int width = 64;
};

// Photometric identity of a domain; never affects labels.
struct DomainStyle {
  std::string domain_id;
  std::vector<std::array<Scalar, 3>> palette;
  Scalar texture_freq = 0.0;
  Scalar noise_sigma = 0.0;
  Scalar illumination_gain = 1.0;
};

struct ManifestRecord {
  std::string split;
  std::string domain_id;
  std::string image_path;
  std::string label_path;
};

struct DatasetManifest {
  std::string root;
  int num_classes = 0;
  std::uint64_t spec_hash = 0;
  std::vector<ManifestRecord> records;
};

void validate_spec(const SceneSpec& spec);
void validate_style(const DomainStyle& style, int num_classes);
std::uint64_t spec_hash(const SceneSpec& spec);

// Label map from geometry only; identical for every style.
LabelMap render_labels(const SceneSpec& spec);
LabeledImage render_scene_in_domain(const SceneSpec& spec,
                                    const DomainStyle& style);

DatasetManifest generate_dataset(const SceneSpec& base_spec,
                                 const DomainStyle& source_style,
                                 const std::vector<DomainStyle>& target_styles,
                                 int n_train, int n_val,
                                 const std::string& out_dir);

DatasetManifest load_manifest(const std::string& path);
LabeledImage load_record(const DatasetManifest& m, const ManifestRecord& rec);
std::vector<ManifestRecord> split_records(const DatasetManifest& m,
                                          const std::string& split);
std::vector<ManifestRecord> domain_records(const DatasetManifest& m,
                                           const std::string& split,
                                           const std::string& domain_id);
std::vector<std::string> val_domains(const DatasetManifest& m);

// Deterministic shuffle for iteration order.
std::vector<int> shuffled_indices(int n, std::uint64_t seed);

// Built-in styles for the multi-domain toy benchmark: one source domain and
// three photometrically shifted targets.
DomainStyle toy_source_style(int num_classes);
std::vector<DomainStyle> toy_target_styles(int num_classes);

// Styles for the corruption-group report, grouped by family. blur_sigma > 0
// applies a Gaussian blur after rendering (blur is not expressible as a
// DomainStyle field).
struct CorruptionStyle {
  std::string group;
  DomainStyle style;
  Scalar blur_sigma = 0.0;
};
std::vector<CorruptionStyle> corruption_styles(int num_classes);

// Same layout as generate_dataset, but the validation split renders the
// corruption styles (post-render blur included).
DatasetManifest generate_corruption_dataset(
    const SceneSpec& base_spec, const DomainStyle& source_style,
    const std::vector<CorruptionStyle>& styles, int n_train, int n_val,
    const std::string& out_dir);

}  // namespace dgseg::scenegen
