#include "dgseg/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dgseg/color.hpp"
#include "dgseg/hashing.hpp"
#include "dgseg/perturb.hpp"
#include "dgseg/png_io.hpp"
#include "dgseg/rng.hpp"

namespace dgseg::scenegen {

namespace fs = std::filesystem;

namespace {

constexpr Scalar kTextureAmp = 0.08;

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-')
      c = '_';
  return out;
}

}  // namespace

Layout layout_from_string(const std::string& s) {
  if (s == "bands") return Layout::bands;
  if (s == "blobs") return Layout::blobs;
  if (s == "mixed") return Layout::mixed;
  throw std::invalid_argument("SceneSpec.layout unknown: " + s);
}

std::string layout_to_string(Layout l) {
  switch (l) {
    case Layout::bands: return "bands";
    case Layout::blobs: return "blobs";
    default: return "mixed";
  }
}

void validate_spec(const SceneSpec& spec) {
  if (spec.num_classes < 2)
    throw std::invalid_argument("SceneSpec.num_classes must be >= 2");
  if (spec.height < 16)
    throw std::invalid_argument("SceneSpec.height must be >= 16");
  if (spec.width < 16)
    throw std::invalid_argument("SceneSpec.width must be >= 16");
  if (spec.num_classes > 254)
    throw std::invalid_argument(
        "SceneSpec.num_classes must leave room for the ignore label");
}

void validate_style(const DomainStyle& style, int num_classes) {
  if (style.domain_id.empty())
    throw std::invalid_argument("DomainStyle.domain_id must be nonempty");
  if (static_cast<int>(style.palette.size()) != num_classes)
    throw std::invalid_argument(
        "DomainStyle.palette must have one entry per class");
  for (const auto& c : style.palette)
    for (const Scalar v : c)
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument(
            "DomainStyle.palette entries must lie in [0,1]");
  for (std::size_t i = 0; i < style.palette.size(); ++i)
    for (std::size_t j = i + 1; j < style.palette.size(); ++j) {
      const Scalar d = std::max(
          {std::abs(style.palette[i][0] - style.palette[j][0]),
           std::abs(style.palette[i][1] - style.palette[j][1]),
           std::abs(style.palette[i][2] - style.palette[j][2])});
      if (d < 0.05)
        throw std::invalid_argument(
            "DomainStyle.palette entries " + std::to_string(i) + " and " +
            std::to_string(j) + " are not distinct (L-inf < 0.05)");
    }
  if (!(style.texture_freq >= 0.0) || !std::isfinite(style.texture_freq))
    throw std::invalid_argument("DomainStyle.texture_freq must be >= 0");
  if (!(style.noise_sigma >= 0.0 && style.noise_sigma <= 0.3))
    throw std::invalid_argument("DomainStyle.noise_sigma must be in [0, 0.3]");
  if (!(style.illumination_gain >= 0.3 && style.illumination_gain <= 1.7))
    throw std::invalid_argument(
        "DomainStyle.illumination_gain must be in [0.3, 1.7]");
}

std::uint64_t spec_hash(const SceneSpec& spec) {
  std::ostringstream ss;
  ss << "seed=" << spec.seed << ";layout=" << layout_to_string(spec.layout)
     << ";K=" << spec.num_classes << ";H=" << spec.height
     << ";W=" << spec.width;
  return fnv1a64(ss.str());
}

LabelMap render_labels(const SceneSpec& spec) {
  validate_spec(spec);
  const int H = spec.height, W = spec.width, K = spec.num_classes;
  LabelMap labels(H, W);
  const auto seed = static_cast<std::uint64_t>(spec.seed);

  auto bands = [&](LabelMap& out) {
    Rng r(mix_seed(seed, 11));
    const Scalar amp = H / (4.0 * K) * (0.5 + r.uniform());
    const Scalar f0 = 1.0 + 2.0 * r.uniform();
    const Scalar phase = 2.0 * M_PI * r.uniform();
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Scalar yy =
            y + amp * std::sin(2.0 * M_PI * f0 * x / W + phase);
        int k = static_cast<int>(std::floor(yy / H * K));
        out(y, x) = std::clamp(k, 0, K - 1);
      }
  };

  auto blobs = [&](LabelMap& out) {
    Rng r(mix_seed(seed, 12));
    const int n = 2 * K;
    std::vector<Scalar> cx(n), cy(n);
    std::vector<int> cls(n);
    for (int i = 0; i < n; ++i) {
      cx[static_cast<std::size_t>(i)] = r.uniform() * W;
      cy[static_cast<std::size_t>(i)] = r.uniform() * H;
      cls[static_cast<std::size_t>(i)] = i % K;
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        Scalar best = 1e30;
        int bk = 0;
        for (int i = 0; i < n; ++i) {
          const Scalar dx = x + 0.5 - cx[static_cast<std::size_t>(i)];
          const Scalar dy = y + 0.5 - cy[static_cast<std::size_t>(i)];
          const Scalar d = dx * dx + dy * dy;
          if (d < best) {
            best = d;
            bk = cls[static_cast<std::size_t>(i)];
          }
        }
        out(y, x) = bk;
      }
  };

  switch (spec.layout) {
    case Layout::bands: bands(labels); break;
    case Layout::blobs: blobs(labels); break;
    case Layout::mixed: {
      bands(labels);
      Rng r(mix_seed(seed, 13));
      for (int i = 0; i < K; ++i) {
        const Scalar cx = r.uniform() * W;
        const Scalar cy = r.uniform() * H;
        const Scalar rad = (0.08 + 0.12 * r.uniform()) * std::min(H, W);
        const int k = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(K)));
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const Scalar dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= rad * rad) labels(y, x) = k;
          }
      }
      break;
    }
  }
  return labels;
}

LabeledImage render_scene_in_domain(const SceneSpec& spec,
                                    const DomainStyle& style) {
  validate_spec(spec);
  validate_style(style, spec.num_classes);
  const int H = spec.height, W = spec.width;
  LabeledImage out;
  out.labels = render_labels(spec);
  out.domain_id = style.domain_id;
  out.image = Image::zero(H, W);

  const std::uint64_t th = fnv1a64(style.domain_id);
  const Scalar theta = 2.0 * M_PI * static_cast<Scalar>(th & 1023) / 1024.0;
  const Scalar phase0 =
      2.0 * M_PI * static_cast<Scalar>((th >> 10) & 1023) / 1024.0;
  const Scalar ux = std::cos(theta), uy = std::sin(theta);

  Rng noise_rng(mix_seed(static_cast<std::uint64_t>(spec.seed), th));
  const bool textured = style.texture_freq > 0.0;
  const bool noisy = style.noise_sigma > 0.0;

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto& base =
          style.palette[static_cast<std::size_t>(out.labels(y, x))];
      Scalar tex = 0.0;
      if (textured) {
        const Scalar u = static_cast<Scalar>(x) / W * ux +
                         static_cast<Scalar>(y) / H * uy;
        tex = kTextureAmp *
              std::sin(2.0 * M_PI * style.texture_freq * u + phase0);
      }
      for (int ch = 0; ch < 3; ++ch) {
        Scalar v = base[static_cast<std::size_t>(ch)] + tex;
        if (noisy) v += noise_rng.normal() * style.noise_sigma;
        v *= style.illumination_gain;
        out.image.c[static_cast<std::size_t>(ch)](y, x) =
            std::clamp(v, 0.0, 1.0);
      }
    }
  return out;
}

DatasetManifest generate_dataset(const SceneSpec& base_spec,
                                 const DomainStyle& source_style,
                                 const std::vector<DomainStyle>& target_styles,
                                 int n_train, int n_val,
                                 const std::string& out_dir) {
  validate_spec(base_spec);
  validate_style(source_style, base_spec.num_classes);
  for (const auto& t : target_styles)
    validate_style(t, base_spec.num_classes);
  if (n_train <= 0) throw std::invalid_argument("n_train must be > 0");
  if (n_val <= 0) throw std::invalid_argument("n_val must be > 0");

  std::set<std::string> ids{source_style.domain_id};
  for (const auto& t : target_styles)
    if (!ids.insert(t.domain_id).second)
      throw std::invalid_argument("duplicate domain_id: " + t.domain_id);

  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (!ec) fs::create_directories(fs::path(out_dir) / "labels", ec);
  if (ec)
    throw std::runtime_error("cannot create dataset directory " + out_dir +
                             ": " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  m.num_classes = base_spec.num_classes;
  m.spec_hash = spec_hash(base_spec);
  const auto base_seed = static_cast<std::uint64_t>(base_spec.seed);

  auto emit = [&](const std::string& split, const DomainStyle& style,
                  std::uint64_t scene_seed, int idx) {
    SceneSpec s = base_spec;
    s.seed = static_cast<std::int64_t>(scene_seed);
    const LabeledImage li = render_scene_in_domain(s, style);
    const std::string tag =
        split + "_" + sanitize(style.domain_id) + "_" + std::to_string(idx);
    ManifestRecord rec;
    rec.split = split;
    rec.domain_id = style.domain_id;
    rec.image_path = "images/img_" + tag + ".png";
    rec.label_path = "labels/lab_" + tag + ".png";
    write_png((fs::path(out_dir) / rec.image_path).string(),
              to_u8(li.image));
    write_png((fs::path(out_dir) / rec.label_path).string(),
              labels_to_u8(li.labels));
    m.records.push_back(rec);
  };

  for (int i = 0; i < n_train; ++i)
    emit("train", source_style, mix_seed(base_seed, static_cast<std::uint64_t>(i)), i);
  for (const auto& style : target_styles)
    for (int i = 0; i < n_val; ++i)
      emit("val", style,
           mix_seed(base_seed, 1000003ULL + static_cast<std::uint64_t>(i)), i);

  std::ofstream out(fs::path(out_dir) / "manifest.tsv");
  if (!out)
    throw std::runtime_error("cannot write manifest in " + out_dir);
  out << "K=" << m.num_classes << "\tspec_hash=" << hash_hex(m.spec_hash)
      << "\n";
  for (const auto& r : m.records)
    out << r.split << "\t" << r.domain_id << "\t" << r.image_path << "\t"
        << r.label_path << "\n";
  out.close();
  if (!out) throw std::runtime_error("manifest write failed in " + out_dir);
  return m;
}

DatasetManifest generate_corruption_dataset(
    const SceneSpec& base_spec, const DomainStyle& source_style,
    const std::vector<CorruptionStyle>& styles, int n_train, int n_val,
    const std::string& out_dir) {
  validate_spec(base_spec);
  validate_style(source_style, base_spec.num_classes);
  if (styles.empty())
    throw std::invalid_argument("generate_corruption_dataset: no styles");
  if (n_train <= 0) throw std::invalid_argument("n_train must be > 0");
  if (n_val <= 0) throw std::invalid_argument("n_val must be > 0");

  std::set<std::string> ids{source_style.domain_id};
  for (const auto& c : styles) {
    validate_style(c.style, base_spec.num_classes);
    if (!ids.insert(c.style.domain_id).second)
      throw std::invalid_argument("duplicate domain_id: " + c.style.domain_id);
  }

  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (!ec) fs::create_directories(fs::path(out_dir) / "labels", ec);
  if (ec)
    throw std::runtime_error("cannot create dataset directory " + out_dir +
                             ": " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  m.num_classes = base_spec.num_classes;
  m.spec_hash = spec_hash(base_spec);
  const auto base_seed = static_cast<std::uint64_t>(base_spec.seed);

  auto emit = [&](const std::string& split, const DomainStyle& style,
                  Scalar blur_sigma, std::uint64_t scene_seed, int idx) {
    SceneSpec s = base_spec;
    s.seed = static_cast<std::int64_t>(scene_seed);
    LabeledImage li = render_scene_in_domain(s, style);
    if (blur_sigma > 0.0) li.image = perturb::gaussian_blur(li.image, blur_sigma);
    const std::string tag =
        split + "_" + sanitize(style.domain_id) + "_" + std::to_string(idx);
    ManifestRecord rec;
    rec.split = split;
    rec.domain_id = style.domain_id;
    rec.image_path = "images/img_" + tag + ".png";
    rec.label_path = "labels/lab_" + tag + ".png";
    write_png((fs::path(out_dir) / rec.image_path).string(), to_u8(li.image));
    write_png((fs::path(out_dir) / rec.label_path).string(),
              labels_to_u8(li.labels));
    m.records.push_back(rec);
  };

  for (int i = 0; i < n_train; ++i)
    emit("train", source_style, 0.0,
         mix_seed(base_seed, static_cast<std::uint64_t>(i)), i);
  for (const auto& c : styles)
    for (int i = 0; i < n_val; ++i)
      emit("val", c.style, c.blur_sigma,
           mix_seed(base_seed, 1000003ULL + static_cast<std::uint64_t>(i)), i);

  std::ofstream out(fs::path(out_dir) / "manifest.tsv");
  if (!out)
    throw std::runtime_error("cannot write manifest in " + out_dir);
  out << "K=" << m.num_classes << "\tspec_hash=" << hash_hex(m.spec_hash)
      << "\n";
  for (const auto& r : m.records)
    out << r.split << "\t" << r.domain_id << "\t" << r.image_path << "\t"
        << r.label_path << "\n";
  out.close();
  if (!out) throw std::runtime_error("manifest write failed in " + out_dir);
  return m;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  if (m.root.empty()) m.root = ".";

  std::string header;
  if (!std::getline(in, header))
    throw std::runtime_error("manifest is empty: " + path);
  int k = 0;
  char hexbuf[17] = {0};
  if (std::sscanf(header.c_str(), "K=%d\tspec_hash=%16s", &k, hexbuf) != 2 ||
      k < 2)
    throw std::runtime_error("manifest header malformed in " + path);
  m.num_classes = k;
  m.spec_hash = std::stoull(hexbuf, nullptr, 16);

  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRecord rec;
    if (!std::getline(ls, rec.split, '\t') ||
        !std::getline(ls, rec.domain_id, '\t') ||
        !std::getline(ls, rec.image_path, '\t') ||
        !std::getline(ls, rec.label_path))
      throw std::runtime_error("manifest line " + std::to_string(lineno) +
                               " malformed in " + path);
    for (const auto& p : {rec.image_path, rec.label_path})
      if (!fs::exists(fs::path(m.root) / p))
        throw std::runtime_error("manifest references missing file: " +
                                 (fs::path(m.root) / p).string());
    m.records.push_back(rec);
  }
  std::set<std::string> train_domains;
  for (const auto& r : m.records)
    if (r.split == "train") train_domains.insert(r.domain_id);
  if (train_domains.size() > 1)
    throw std::runtime_error(
        "manifest train split must contain exactly one domain_id");
  return m;
}

LabeledImage load_record(const DatasetManifest& m, const ManifestRecord& rec) {
  LabeledImage li;
  const std::string img_path = (fs::path(m.root) / rec.image_path).string();
  const std::string lab_path = (fs::path(m.root) / rec.label_path).string();
  li.image = from_u8(read_png(img_path));
  li.labels = labels_from_u8(read_png(lab_path));
  li.domain_id = rec.domain_id;
  if (li.labels.rows() != li.image.height() ||
      li.labels.cols() != li.image.width())
    throw std::runtime_error("image/label size mismatch for " + img_path);
  for (Index y = 0; y < li.labels.rows(); ++y)
    for (Index x = 0; x < li.labels.cols(); ++x) {
      const int v = li.labels(y, x);
      if (v != kIgnoreLabel && v >= m.num_classes)
        throw std::runtime_error(
            "label value " + std::to_string(v) +
            " >= K=" + std::to_string(m.num_classes) + " in file " + lab_path);
    }
  return li;
}

std::vector<ManifestRecord> split_records(const DatasetManifest& m,
                                          const std::string& split) {
  std::vector<ManifestRecord> out;
  for (const auto& r : m.records)
    if (r.split == split) out.push_back(r);
  return out;
}

std::vector<ManifestRecord> domain_records(const DatasetManifest& m,
                                           const std::string& split,
                                           const std::string& domain_id) {
  std::vector<ManifestRecord> out;
  for (const auto& r : m.records)
    if (r.split == split && r.domain_id == domain_id) out.push_back(r);
  return out;
}

std::vector<std::string> val_domains(const DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records)
    if (r.split == "val" &&
        std::find(out.begin(), out.end(), r.domain_id) == out.end())
      out.push_back(r.domain_id);
  return out;
}

std::vector<int> shuffled_indices(int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng r(mix_seed(seed, 77));
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(
        r.uniform_int(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

namespace {

std::vector<std::array<Scalar, 3>> base_palette(int k) {
  std::vector<std::array<Scalar, 3>> p;
  p.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const Scalar h = std::fmod(0.07 + 0.618033988749895 * i, 1.0);
    p.push_back(hsv_to_rgb(h, 0.65, 0.85));
  }
  return p;
}

std::vector<std::array<Scalar, 3>> shift_palette(
    const std::vector<std::array<Scalar, 3>>& in, Scalar dh, Scalar sf,
    Scalar vf) {
  std::vector<std::array<Scalar, 3>> out;
  out.reserve(in.size());
  for (const auto& c : in) {
    auto hsv = rgb_to_hsv(c[0], c[1], c[2]);
    out.push_back(hsv_to_rgb(hsv[0] + dh,
                             std::clamp(hsv[1] * sf, 0.0, 1.0),
                             std::clamp(hsv[2] * vf, 0.0, 1.0)));
  }
  return out;
}

}  // namespace

DomainStyle toy_source_style(int num_classes) {
  DomainStyle s;
  s.domain_id = "source";
  s.palette = base_palette(num_classes);
  s.texture_freq = 6.0;
  s.noise_sigma = 0.02;
  s.illumination_gain = 1.0;
  return s;
}

std::vector<DomainStyle> toy_target_styles(int num_classes) {
  const auto base = base_palette(num_classes);
  std::vector<DomainStyle> out(3);
  out[0].domain_id = "target_warm";
  out[0].palette = shift_palette(base, 0.06, 1.15, 1.0);
  out[0].texture_freq = 3.0;
  out[0].noise_sigma = 0.04;
  out[0].illumination_gain = 1.3;
  out[1].domain_id = "target_cold";
  out[1].palette = shift_palette(base, -0.06, 0.8, 0.95);
  out[1].texture_freq = 14.0;
  out[1].noise_sigma = 0.06;
  out[1].illumination_gain = 0.7;
  out[2].domain_id = "target_rough";
  out[2].palette = shift_palette(base, 0.03, 1.0, 0.9);
  out[2].texture_freq = 26.0;
  out[2].noise_sigma = 0.11;
  out[2].illumination_gain = 1.0;
  return out;
}

std::vector<CorruptionStyle> corruption_styles(int num_classes) {
  const DomainStyle src = toy_source_style(num_classes);
  auto mk = [&](const std::string& group, const std::string& name,
                Scalar dh, Scalar sf, Scalar vf, Scalar freq, Scalar noise,
                Scalar gain, Scalar blur) {
    CorruptionStyle c;
    c.group = group;
    c.style = src;
    c.style.domain_id = "corrupt:" + group + ":" + name;
    c.style.palette = shift_palette(src.palette, dh, sf, vf);
    c.style.texture_freq = freq;
    c.style.noise_sigma = noise;
    c.style.illumination_gain = gain;
    c.blur_sigma = blur;
    return c;
  };
  return {
      mk("Blur", "gauss1", 0.0, 1.0, 1.0, 6.0, 0.02, 1.0, 1.0),
      mk("Blur", "gauss2", 0.0, 1.0, 1.0, 6.0, 0.02, 1.0, 2.0),
      mk("Noise", "gauss_lo", 0.0, 1.0, 1.0, 6.0, 0.10, 1.0, 0.0),
      mk("Noise", "gauss_hi", 0.0, 1.0, 1.0, 6.0, 0.20, 1.0, 0.0),
      mk("Digital", "bright", 0.0, 1.0, 1.0, 6.0, 0.02, 1.45, 0.0),
      mk("Digital", "dark", 0.0, 1.0, 1.0, 6.0, 0.02, 0.55, 0.0),
      mk("Weather", "fog", 0.0, 0.45, 1.1, 2.0, 0.03, 1.25, 0.5),
      mk("Weather", "frost", -0.1, 1.2, 0.85, 6.0, 0.08, 0.85, 0.0),
      mk("Elastic", "ripple_lo", 0.0, 1.0, 1.0, 32.0, 0.02, 1.0, 0.0),
      mk("Elastic", "ripple_hi", 0.0, 1.0, 1.0, 48.0, 0.02, 1.0, 0.0),
  };
}

}  // namespace dgseg::scenegen
