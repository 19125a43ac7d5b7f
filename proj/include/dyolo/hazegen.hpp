#pragma once

// Synthetic fog via the atmospheric scattering model
//   I(x) = J(x) t(x) + A (1 - t(x)),   t(x) = exp(-beta d(x)),
//   d(x) = max(0, -0.04 rho(x) + sqrt(max(w, h)))
// where rho is the distance to the geometric image centre, plus the toy
// "shapes" scene generator and paired clean/hazy dataset builder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dyolo/boxes.hpp"
#include "dyolo/image.hpp"
#include "dyolo/voc.hpp"

namespace dyolo {

struct HazeParams {
  double atmospheric_light = 0.5;
  double beta = 0.1;
  double beta_min = 0.07;
  double beta_max = 0.12;

  void validate() const {
    if (!(atmospheric_light >= 0 && atmospheric_light <= 1)) {
      throw InvalidArgument("HazeParams: atmospheric light must lie in [0,1]");
    }
    if (!(beta >= 0)) throw InvalidArgument("HazeParams: beta must be >= 0");
    if (!(beta_min >= 0 && beta_min <= beta_max)) {
      throw InvalidArgument("HazeParams: need 0 <= beta_min <= beta_max");
    }
  }

  double sample_beta(std::mt19937_64& rng) const {
    return std::uniform_real_distribution<double>(beta_min, beta_max)(rng);
  }
};

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;  // row-major
  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct TransmissionMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;
  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

inline DepthMap depth_map(int width, int height) {
  if (width < 1 || height < 1) throw InvalidArgument("depth_map: dimensions must be >= 1");
  DepthMap d{width, height, std::vector<double>(static_cast<std::size_t>(width) * height)};
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;
  const double base = std::sqrt(static_cast<double>(std::max(width, height)));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double rho = std::hypot(x - cx, y - cy);
      d.values[static_cast<std::size_t>(y) * width + x] = std::max(0.0, -0.04 * rho + base);
    }
  return d;
}

inline TransmissionMap transmission(const DepthMap& depth, double beta) {
  if (!(beta >= 0)) throw InvalidArgument("transmission: beta must be >= 0");
  TransmissionMap t{depth.width, depth.height, std::vector<double>(depth.values.size())};
  std::transform(depth.values.begin(), depth.values.end(), t.values.begin(),
                 [beta](double d) { return std::exp(-beta * d); });
  return t;
}

inline ImagePlane apply_haze(const ImagePlane& clean, const TransmissionMap& t, double airlight) {
  if (clean.width != t.width || clean.height != t.height) {
    throw InvalidArgument("apply_haze: transmission map does not match image size");
  }
  ImagePlane out = clean;
  for (int y = 0; y < clean.height; ++y)
    for (int x = 0; x < clean.width; ++x) {
      const double tx = t.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double j = clean.at(x, y, c);
        const double v = j * tx + airlight * (1.0 - tx);
        // Rounding must not leave the segment between J and A.
        out.at(x, y, c) = std::clamp(v, std::min(j, airlight), std::max(j, airlight));
      }
    }
  return out;
}

// Additive bright streaks, the `--rain` degradation.
inline ImagePlane add_rain(const ImagePlane& img, std::mt19937_64& rng, int streaks = 40) {
  ImagePlane out = img;
  std::uniform_int_distribution<int> px(0, img.width - 1);
  std::uniform_int_distribution<int> py(0, img.height - 1);
  std::uniform_int_distribution<int> len(3, 8);
  for (int s = 0; s < streaks; ++s) {
    int x = px(rng), y = py(rng);
    const int l = len(rng);
    for (int k = 0; k < l && x < img.width && y < img.height; ++k, ++y, x += (k % 3 == 0)) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = std::min(1.0, out.at(x, y, c) + 0.25);
    }
  }
  return out;
}

struct ScenePair {
  ImagePlane clean;
  ImagePlane hazy;
  std::vector<GroundTruthBox> boxes;
  HazeParams haze;  // beta holds the value used for this scene
  std::uint64_t seed = 0;
};

struct ToySceneOptions {
  int width = 64;
  int height = 64;
  int class_count = kClassCount;
  HazeParams haze;
  std::optional<double> forced_beta;  // otherwise sampled from [beta_min, beta_max]
  bool rain = false;
};

namespace detail {

struct Shape2D {
  int class_id;
  double cx, cy, w, h;
};

inline bool shape_contains(const Shape2D& s, double x, double y) {
  const double dx = (x - s.cx) / (s.w / 2);
  const double dy = (y - s.cy) / (s.h / 2);
  switch (s.class_id) {
    case 0:  // person: upright ellipse
      return dx * dx + dy * dy <= 1.0;
    case 1: {  // bicycle: ring
      const double r = dx * dx + dy * dy;
      return r <= 1.0 && r >= 0.3;
    }
    case 2:  // car: wide box with a cut-out cabin line
      return std::abs(dx) <= 1 && std::abs(dy) <= 1 && !(dy < -0.2 && std::abs(dx) > 0.6);
    case 3:  // motorcycle: triangle
      return dy <= 1 && dy >= -1 && std::abs(dx) <= (dy + 1) / 2;
    default:  // bus: box
      return std::abs(dx) <= 1 && std::abs(dy) <= 1;
  }
}

// Class-specific texture factor applied to the object colour.
inline double texture(int class_id, int x, int y) {
  switch (class_id) {
    case 4: return (x / 2) % 2 == 0 ? 1.0 : 0.55;  // bus: vertical stripes
    case 2: return ((x + y) / 3) % 2 == 0 ? 1.0 : 0.8;
    default: return 1.0;
  }
}

}  // namespace detail

// Deterministic given (seed, options). Objects do not overlap; boxes are the
// tight extents of the rasterised shapes.
inline ScenePair generate_toy_scene(std::uint64_t seed, const ToySceneOptions& opt) {
  if (opt.width < 32 || opt.height < 32) throw InvalidArgument("generate_toy_scene: canvas must be >= 32x32");
  if (opt.class_count < 1 || opt.class_count > kClassCount) {
    throw InvalidArgument("generate_toy_scene: class_count must lie in [1,5]");
  }
  opt.haze.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  ScenePair scene;
  scene.seed = seed;
  scene.clean = ImagePlane(opt.width, opt.height);

  // Smooth two-corner gradient background with mild noise.
  double bg0[3], bg1[3];
  for (int c = 0; c < 3; ++c) {
    bg0[c] = uniform(0.3, 0.7);
    bg1[c] = uniform(0.3, 0.7);
  }
  const double angle = uniform(0, 2 * M_PI);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < opt.height; ++y)
    for (int x = 0; x < opt.width; ++x) {
      const double s = 0.5 + 0.5 * ((x / double(opt.width) - 0.5) * std::cos(angle) +
                                    (y / double(opt.height) - 0.5) * std::sin(angle));
      for (int c = 0; c < 3; ++c)
        scene.clean.at(x, y, c) = std::clamp(bg0[c] * (1 - s) + bg1[c] * s + noise(rng), 0.0, 1.0);
    }

  const int wanted = 1 + static_cast<int>(unit(rng) * 6) % 6;
  std::vector<Box> placed;
  for (int attempt = 0; attempt < 60 && static_cast<int>(placed.size()) < wanted; ++attempt) {
    detail::Shape2D s{static_cast<int>(unit(rng) * opt.class_count) % opt.class_count, 0, 0, 0, 0};
    switch (s.class_id) {
      case 0: s.h = uniform(12, 30); s.w = s.h * uniform(0.4, 0.55); break;
      case 1: s.w = s.h = uniform(10, 24); break;
      case 2: s.w = uniform(14, 32); s.h = s.w * uniform(0.5, 0.65); break;
      case 3: s.w = uniform(10, 24); s.h = s.w * uniform(0.8, 1.0); break;
      default: s.w = uniform(20, 40); s.h = s.w * uniform(0.55, 0.75); break;
    }
    s.cx = uniform(s.w / 2 + 1, opt.width - s.w / 2 - 1);
    s.cy = uniform(s.h / 2 + 1, opt.height - s.h / 2 - 1);

    int x0 = opt.width, y0 = opt.height, x1 = -1, y1 = -1;
    for (int y = 0; y < opt.height; ++y)
      for (int x = 0; x < opt.width; ++x)
        if (detail::shape_contains(s, x + 0.5, y + 0.5)) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x);
          y1 = std::max(y1, y);
        }
    if (x1 - x0 < 2 || y1 - y0 < 2) continue;
    const Box box{double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
    const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Box& b) {
      return box.xmin < b.xmax + 1 && b.xmin < box.xmax + 1 && box.ymin < b.ymax + 1 && b.ymin < box.ymax + 1;
    });
    if (clash) continue;

    // Colour contrasting with the local background: pushed toward 0 or 1.
    const bool bright = unit(rng) < 0.5;
    double color[3];
    for (int c = 0; c < 3; ++c) color[c] = bright ? uniform(0.75, 1.0) : uniform(0.0, 0.25);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (detail::shape_contains(s, x + 0.5, y + 0.5)) {
          const double tex = detail::texture(s.class_id, x, y);
          for (int c = 0; c < 3; ++c) scene.clean.at(x, y, c) = std::clamp(color[c] * tex, 0.0, 1.0);
        }
    placed.push_back(box);
    scene.boxes.push_back(GroundTruthBox{s.class_id, box, false});
  }

  scene.haze = opt.haze;
  scene.haze.beta = opt.forced_beta ? *opt.forced_beta : opt.haze.sample_beta(rng);
  const auto t = transmission(depth_map(opt.width, opt.height), scene.haze.beta);
  scene.hazy = apply_haze(scene.clean, t, scene.haze.atmospheric_light);
  if (opt.rain) scene.hazy = add_rain(scene.hazy, rng);
  return scene;
}

// ---------------------------------------------------------------------------
// Paired datasets on disk.

struct ManifestRow {
  std::string split;  // "train" | "test"
  std::string clean_path;
  std::string hazy_path;
  std::string annotation_path;
  double beta = 0;
};

// Tab-separated text, one row per sample; paths relative to the dataset
// directory. First line is the format tag, second the column header.
struct DatasetManifest {
  static constexpr const char* kFormatTag = "# dyolo-manifest v1";
  std::filesystem::path root;
  std::vector<ManifestRow> rows;
  int dropped_boxes = 0;

  std::vector<const ManifestRow*> split(const std::string& name) const {
    std::vector<const ManifestRow*> out;
    for (const auto& r : rows)
      if (r.split == name) out.push_back(&r);
    return out;
  }
};

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw IoError("write_manifest: cannot open " + path.string());
  out << DatasetManifest::kFormatTag << "\n";
  out << "clean_path\thazy_path\tannotation_path\tbeta\tsplit\n";
  out << std::setprecision(17);
  for (const auto& r : m.rows) {
    out << r.clean_path << '\t' << r.hazy_path << '\t' << r.annotation_path << '\t' << r.beta << '\t'
        << r.split << '\n';
  }
  if (!out) throw IoError("write_manifest: write failed for " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_manifest: cannot open " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != DatasetManifest::kFormatTag) {
    throw ValidationError("read_manifest: missing format tag in " + path.string());
  }
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    ManifestRow r;
    std::string beta;
    if (!std::getline(ss, r.clean_path, '\t') || !std::getline(ss, r.hazy_path, '\t') ||
        !std::getline(ss, r.annotation_path, '\t') || !std::getline(ss, beta, '\t') ||
        !std::getline(ss, r.split, '\t')) {
      throw ValidationError("read_manifest: malformed row: " + line);
    }
    r.beta = std::stod(beta);
    m.rows.push_back(std::move(r));
  }
  return m;
}

struct DatasetSpec {
  std::filesystem::path out_dir;
  int train = 200;
  int test = 50;
  std::uint64_t seed = 7;
  int width = 64;
  int height = 64;
  std::vector<std::string> classes{kClassNames.begin(), kClassNames.end()};
  HazeParams haze;
  bool rain = false;
  // When set, clean images come from a VOC-style corpus (PNG images next to
  // XML annotations) instead of the toy generator.
  std::optional<std::filesystem::path> import_images;
  std::optional<std::filesystem::path> import_annotations;
};

inline std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(dataset_seed), static_cast<std::uint32_t>(dataset_seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

namespace detail {

inline std::vector<int> resolve_classes(const std::vector<std::string>& names) {
  std::vector<int> ids;
  for (const auto& n : names) {
    const auto id = class_id_from_name(n);
    if (!id) throw ValidationError("unknown class name '" + n + "'");
    ids.push_back(*id);
  }
  return ids;
}

inline std::string sample_name(std::size_t i) {
  std::ostringstream ss;
  ss << std::setw(6) << std::setfill('0') << i;
  return ss.str();
}

}  // namespace detail

// Writes images/clean, images/hazy, annotations and manifest.tsv under
// spec.out_dir. Reproducible: identical specs give identical files.
inline DatasetManifest build_dataset(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  spec.haze.validate();
  if (spec.train < 0 || spec.test < 0) throw ValidationError("build_dataset: split sizes must be >= 0");
  const auto class_ids = detail::resolve_classes(spec.classes);
  const int max_class = class_ids.empty() ? -1 : *std::max_element(class_ids.begin(), class_ids.end());

  std::error_code ec;
  for (const char* sub : {"images/clean", "images/hazy", "annotations"}) {
    fs::create_directories(spec.out_dir / sub, ec);
    if (ec) throw IoError("build_dataset: cannot create " + (spec.out_dir / sub).string() + ": " + ec.message());
  }

  DatasetManifest manifest;
  manifest.root = spec.out_dir;

  struct Source {
    ImagePlane clean;
    std::vector<GroundTruthBox> boxes;
  };
  std::vector<fs::path> imported;
  if (spec.import_annotations) {
    for (const auto& entry : fs::directory_iterator(*spec.import_annotations)) {
      if (entry.path().extension() == ".xml") imported.push_back(entry.path());
    }
    std::sort(imported.begin(), imported.end());
  }

  auto keep_class = [&](int id) { return std::find(class_ids.begin(), class_ids.end(), id) != class_ids.end(); };

  const std::size_t total = static_cast<std::size_t>(spec.train) + spec.test;
  std::size_t next_import = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const std::uint64_t seed = sample_seed(spec.seed, i);
    std::mt19937_64 haze_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    Source src;
    if (spec.import_annotations) {
      // Skip corpus images with no object of a kept class.
      bool found = false;
      while (!found && next_import < imported.size()) {
        const auto ann = read_voc(imported[next_import++]);
        manifest.dropped_boxes += ann.dropped;
        std::vector<GroundTruthBox> kept;
        for (const auto& o : ann.objects) {
          if (keep_class(o.class_id)) kept.push_back(o);
          else ++manifest.dropped_boxes;
        }
        if (kept.empty()) continue;
        const fs::path img_dir = spec.import_images ? *spec.import_images : *spec.import_annotations;
        src.clean = read_png(img_dir / ann.filename);
        src.boxes = std::move(kept);
        found = true;
      }
      if (!found) break;
    } else {
      ToySceneOptions opt;
      opt.width = spec.width;
      opt.height = spec.height;
      opt.class_count = max_class + 1;
      opt.haze = spec.haze;
      auto scene = generate_toy_scene(seed, opt);
      src.clean = std::move(scene.clean);
      for (const auto& b : scene.boxes) {
        if (keep_class(b.class_id)) src.boxes.push_back(b);
        else ++manifest.dropped_boxes;
      }
    }

    const double beta = spec.haze.sample_beta(haze_rng);
    auto hazy = apply_haze(src.clean, transmission(depth_map(src.clean.width, src.clean.height), beta),
                           spec.haze.atmospheric_light);
    if (spec.rain) hazy = add_rain(hazy, haze_rng);

    const std::string name = detail::sample_name(i);
    ManifestRow row;
    row.split = i < static_cast<std::size_t>(spec.train) ? "train" : "test";
    row.clean_path = "images/clean/" + name + ".png";
    row.hazy_path = "images/hazy/" + name + ".png";
    row.annotation_path = "annotations/" + name + ".xml";
    row.beta = beta;
    write_png(spec.out_dir / row.clean_path, src.clean);
    write_png(spec.out_dir / row.hazy_path, hazy);
    write_voc(spec.out_dir / row.annotation_path,
              Annotation{name + ".png", src.clean.width, src.clean.height, src.boxes, 0});
    manifest.rows.push_back(std::move(row));
  }
  write_manifest(spec.out_dir / "manifest.tsv", manifest);
  return manifest;
}

}  // namespace dyolo
