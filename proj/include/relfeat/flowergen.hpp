#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "relfeat/common.hpp"
#include "relfeat/dataset.hpp"
#include "relfeat/io/png.hpp"
#include "relfeat/tensor.hpp"

namespace relfeat {

enum class FlowerVariant { single_6c, double_12c, part_2c };

inline std::string_view to_string(FlowerVariant v) {
  switch (v) {
    case FlowerVariant::single_6c: return "single-6c";
    case FlowerVariant::double_12c: return "double-12c";
    case FlowerVariant::part_2c: return "part-2c";
  }
  return "?";
}

inline FlowerVariant parse_variant(std::string_view s) {
  if (s == "single-6c") return FlowerVariant::single_6c;
  if (s == "double-12c") return FlowerVariant::double_12c;
  if (s == "part-2c") return FlowerVariant::part_2c;
  throw ConfigError("unknown flower variant '" + std::string(s) + "' (single-6c, double-12c, part-2c)");
}

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline constexpr std::array<std::string_view, 6> kPaletteNames{"red", "green", "blue", "yellow", "magenta", "cyan"};
inline constexpr std::array<Rgb, 6> kPalette{
    Rgb{220, 40, 40}, Rgb{40, 200, 60}, Rgb{50, 80, 230}, Rgb{230, 220, 40}, Rgb{220, 50, 220}, Rgb{40, 210, 220}};
inline constexpr Rgb kBackground{0, 0, 0};
inline constexpr Rgb kNeutralStem{70, 110, 50};
inline constexpr Rgb kNeutralLeaf{60, 120, 50};
inline constexpr Rgb kNeutralHead{150, 150, 150};
inline constexpr Rgb kCentre{90, 60, 30};
inline constexpr Rgb kAccent{235, 235, 235};

struct FlowerSpec {
  FlowerVariant variant = FlowerVariant::single_6c;
  int raw_side = 300;
  int crop_side = 250;
  int frames = 40;
  std::string profile = "full";

  int class_count() const {
    switch (variant) {
      case FlowerVariant::single_6c: return 6;
      case FlowerVariant::double_12c: return 12;
      case FlowerVariant::part_2c: return 2;
    }
    return 0;
  }
  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    if (variant == FlowerVariant::part_2c) return {"balls", "thorns"};
    for (auto n : kPaletteNames) out.push_back(variant == FlowerVariant::double_12c ? "head-" + std::string(n) : std::string(n));
    if (variant == FlowerVariant::double_12c)
      for (auto n : kPaletteNames) out.push_back("stem-" + std::string(n));
    return out;
  }
};

inline constexpr std::array<int, 5> kAngles{5, 10, 15, 20, 25};
inline constexpr int kCropsPerFrame = 5;
inline constexpr int kFolds = 5;
inline constexpr int kGeneratorVersion = 1;

/// Desk-scale profile: 64 x 64 crops of 77 x 77 renders, 4 frames (100 images) per class.
inline FlowerSpec mini_profile(FlowerSpec spec) {
  spec.raw_side = 77;
  spec.crop_side = 64;
  spec.frames = 4;
  spec.profile = "mini";
  return spec;
}

inline FlowerSpec full_profile(FlowerSpec spec) {
  spec.raw_side = 300;
  spec.crop_side = 250;
  spec.frames = 40;
  spec.profile = "full";
  return spec;
}

/// Which painted part carries the class signal, and the colours of head and stem.
struct ClassPaint {
  Rgb head = kNeutralHead;
  Rgb stem = kNeutralStem;
  bool balls = false;
  bool thorns = false;
  enum class Part { head, stem, balls, thorns } part = Part::head;
};

inline ClassPaint class_paint(const FlowerSpec& spec, int j) {
  if (j < 0 || j >= spec.class_count()) throw std::out_of_range("flower class " + std::to_string(j) + " out of range");
  ClassPaint p;
  switch (spec.variant) {
    case FlowerVariant::single_6c: p.head = kPalette[static_cast<std::size_t>(j)]; break;
    case FlowerVariant::double_12c:
      if (j < 6) {
        p.head = kPalette[static_cast<std::size_t>(j)];
      } else {
        p.stem = kPalette[static_cast<std::size_t>(j - 6)];
        p.part = ClassPaint::Part::stem;
      }
      break;
    case FlowerVariant::part_2c:
      p.balls = j == 0;
      p.thorns = j == 1;
      p.part = j == 0 ? ClassPaint::Part::balls : ClassPaint::Part::thorns;
      break;
  }
  return p;
}

struct Frame {
  Tensor image;  // 1 x 3 x S x S, values k/255
  Tensor mask;   // 1 x 1 x S x S, {0, 1}
};

namespace detail {

struct Pt {
  double x = 0, y = 0;
};

inline bool in_ellipse(Pt p, Pt c, double a, double b, double angle) {
  const double dx = p.x - c.x, dy = p.y - c.y;
  const double cs = std::cos(angle), sn = std::sin(angle);
  const double u = (dx * cs + dy * sn) / a, v = (-dx * sn + dy * cs) / b;
  return u * u + v * v <= 1.0;
}

inline bool in_disk(Pt p, Pt c, double r) { return (p.x - c.x) * (p.x - c.x) + (p.y - c.y) * (p.y - c.y) <= r * r; }

inline bool in_triangle(Pt p, Pt a, Pt b, Pt c) {
  auto side = [](Pt p, Pt q, Pt r) { return (p.x - r.x) * (q.y - r.y) - (q.x - r.x) * (p.y - r.y); };
  const double d1 = side(p, a, b), d2 = side(p, b, c), d3 = side(p, c, a);
  const bool neg = d1 < 0 || d2 < 0 || d3 < 0, pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(neg && pos);
}

inline double segment_distance(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

/// Frame geometry in unit coordinates (y down). Depends on the frame index only, never on the class.
struct Geometry {
  std::vector<Pt> stem;  // polyline
  double stem_half_width = 0.035;
  struct Ellipse {
    Pt c;
    double a, b, angle;
  };
  std::vector<Ellipse> leaves, petals;
  Pt head;
  double centre_radius = 0.05;
  std::vector<Pt> balls;
  double ball_radius = 0.036;
  std::vector<std::array<Pt, 3>> thorns;
};

inline Geometry frame_geometry(int t, int frames) {
  constexpr double kPi = 3.14159265358979323846;
  const double phase = static_cast<double>(t) / std::max(frames, 1);
  const double view = 2.0 * kPi * phase;
  const double sway = 0.06 * std::sin(view);
  const double squash = 0.65 + 0.35 * std::abs(std::cos(view));
  Geometry g;
  // Quadratic Bezier from the base to the head; the control point carries the sway.
  const Pt p0{0.5, 0.96}, p1{0.5 - 1.2 * sway, 0.70}, p2{0.5 + sway, 0.40};
  constexpr int kSegments = 40;
  for (int i = 0; i <= kSegments; ++i) {
    const double u = static_cast<double>(i) / kSegments;
    const double a = (1 - u) * (1 - u), b = 2 * (1 - u) * u, c = u * u;
    g.stem.push_back({a * p0.x + b * p1.x + c * p2.x, a * p0.y + b * p1.y + c * p2.y});
  }
  g.head = p2;
  auto on_stem = [&](double u) { return g.stem[static_cast<std::size_t>(std::lround(u * kSegments))]; };
  const double leaf_tilt = 0.7 + 0.2 * std::sin(view + 1.0);
  g.leaves.push_back({{on_stem(0.35).x - 0.085 * squash, on_stem(0.35).y}, 0.10 * squash, 0.035, leaf_tilt});
  g.leaves.push_back({{on_stem(0.55).x + 0.085 * squash, on_stem(0.55).y}, 0.10 * squash, 0.035, -leaf_tilt});
  const double petal_phase = kPi / 8.0 * phase;
  for (int k = 0; k < 8; ++k) {
    const double th = petal_phase + k * kPi / 4.0;
    const double dx = std::cos(th) * squash, dy = std::sin(th);
    g.petals.push_back({{g.head.x + 0.11 * dx, g.head.y + 0.11 * dy}, 0.095, 0.045, std::atan2(dy, dx)});
  }
  for (int k = 0; k < 6; ++k) {
    const double th = petal_phase + kPi / 8.0 + k * kPi / 3.0;
    g.balls.push_back({g.head.x + 0.19 * std::cos(th) * squash, g.head.y + 0.19 * std::sin(th)});
  }
  for (int k = 0; k < 10; ++k) {
    const double u = 0.08 + 0.07 * k;
    const std::size_t i = static_cast<std::size_t>(std::lround(u * kSegments));
    const Pt a = g.stem[i], b = g.stem[std::min<std::size_t>(i + 4, kSegments)];
    const double side = (k % 2 == 0) ? 1.0 : -1.0;
    const double hw = g.stem_half_width * 0.8;
    g.thorns.push_back({Pt{a.x + side * hw, a.y}, Pt{b.x + side * hw, b.y},
                        Pt{(a.x + b.x) / 2 + side * (hw + 0.11), (a.y + b.y) / 2 - 0.015}});
  }
  return g;
}

}  // namespace detail

/// Deterministic 2D render of class j at frame t. The mask holds the pixels that
/// ended up painted by the class-defining part.
inline Frame render_frame(const FlowerSpec& spec, int j, int t) {
  if (t < 0 || t >= spec.frames)
    throw std::out_of_range("render_frame: frame " + std::to_string(t) + " not in [0, " + std::to_string(spec.frames) + ")");
  const ClassPaint paint = class_paint(spec, j);
  const auto g = detail::frame_geometry(t, spec.frames);
  const auto n = static_cast<std::size_t>(spec.raw_side);
  Frame f{Tensor({1, 3, n, n}), Tensor({1, 1, n, n})};
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const detail::Pt p{(static_cast<double>(x) + 0.5) * inv, (static_cast<double>(y) + 0.5) * inv};
      Rgb c = kBackground;
      ClassPaint::Part part = ClassPaint::Part::head;
      bool painted_part = false;
      auto paint_px = [&](Rgb colour, bool is_part, ClassPaint::Part which) {
        c = colour;
        painted_part = is_part;
        part = which;
      };
      double stem_d = 1e9;
      for (std::size_t i = 0; i + 1 < g.stem.size(); ++i)
        stem_d = std::min(stem_d, detail::segment_distance(p, g.stem[i], g.stem[i + 1]));
      if (stem_d <= g.stem_half_width) paint_px(paint.stem, paint.part == ClassPaint::Part::stem, ClassPaint::Part::stem);
      for (const auto& l : g.leaves)
        if (detail::in_ellipse(p, l.c, l.a, l.b, l.angle)) paint_px(kNeutralLeaf, false, part);
      if (paint.thorns)
        for (const auto& th : g.thorns)
          if (detail::in_triangle(p, th[0], th[1], th[2])) paint_px(kAccent, true, ClassPaint::Part::thorns);
      for (const auto& pe : g.petals)
        if (detail::in_ellipse(p, pe.c, pe.a, pe.b, pe.angle))
          paint_px(paint.head, paint.part == ClassPaint::Part::head, ClassPaint::Part::head);
      if (detail::in_disk(p, g.head, g.centre_radius)) paint_px(kCentre, false, part);
      if (paint.balls)
        for (const auto& b : g.balls)
          if (detail::in_disk(p, b, g.ball_radius)) paint_px(kAccent, true, ClassPaint::Part::balls);
      (void)part;
      f.image.at(0, 0, y, x) = c.r / 255.0f;
      f.image.at(0, 1, y, x) = c.g / 255.0f;
      f.image.at(0, 2, y, x) = c.b / 255.0f;
      f.mask.at(0, 0, y, x) = painted_part ? 1.0f : 0.0f;
    }
  return f;
}

inline double mask_fraction(const Tensor& mask) {
  double s = 0;
  for (float v : mask.values()) s += v > 0.5f;
  return s / static_cast<double>(mask.size());
}

inline std::size_t mask_count(const Tensor& mask) {
  std::size_t s = 0;
  for (float v : mask.values()) s += v > 0.5f;
  return s;
}

/// Top-left corner of crop `index` (0..3 corners tl, tr, bl, br; 4 centre).
inline std::pair<int, int> crop_origin(int raw, int crop, int index) {
  const int far = raw - crop, mid = (raw - crop) / 2;
  switch (index) {
    case 0: return {0, 0};
    case 1: return {0, far};
    case 2: return {far, 0};
    case 3: return {far, far};
    case 4: return {mid, mid};
  }
  throw std::out_of_range("crop index " + std::to_string(index));
}

inline Tensor crop(const Tensor& t, int y0, int x0, int side) {
  const Shape& s = t.shape();
  if (y0 < 0 || x0 < 0 || static_cast<std::size_t>(y0 + side) > s.h || static_cast<std::size_t>(x0 + side) > s.w)
    throw std::out_of_range("crop outside image");
  Tensor out({1, s.c, static_cast<std::size_t>(side), static_cast<std::size_t>(side)});
  for (std::size_t c = 0; c < s.c; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        out.at(0, c, y, x) = t.at(0, c, static_cast<std::size_t>(y0 + y), static_cast<std::size_t>(x0 + x));
  return out;
}

/// Rotation by `degrees` about the image centre, zero fill outside. Bilinear or nearest sampling.
inline Tensor rotate(const Tensor& t, double degrees, bool nearest) {
  const Shape& s = t.shape();
  Tensor out(s);
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(s.h) - 1) / 2, cx = (static_cast<double>(s.w) - 1) / 2;
  const double maxy = static_cast<double>(s.h) - 1, maxx = static_cast<double>(s.w) - 1;
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      // Inverse mapping: destination -> source.
      const double sy = cy + cs * dy - sn * dx;
      const double sx = cx + sn * dy + cs * dx;
      if (nearest) {
        const long iy = std::lround(sy), ix = std::lround(sx);
        if (iy < 0 || ix < 0 || iy > static_cast<long>(maxy) || ix > static_cast<long>(maxx)) continue;
        for (std::size_t c = 0; c < s.c; ++c)
          out.at(0, c, y, x) = t.at(0, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
        continue;
      }
      if (sy < 0 || sx < 0 || sy > maxy || sx > maxx) continue;
      const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, s.h - 1), x1 = std::min(x0 + 1, s.w - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const double v = (1 - fy) * ((1 - fx) * t.at(0, c, y0, x0) + fx * t.at(0, c, y0, x1)) +
                         fy * ((1 - fx) * t.at(0, c, y1, x0) + fx * t.at(0, c, y1, x1));
        out.at(0, c, y, x) = static_cast<float>(v);
      }
    }
  return out;
}

/// Snap values to the 8-bit grid so in-memory samples equal what a PNG round trip yields.
inline void quantise(Tensor& t) {
  for (float& v : t.values()) v = io::to_byte(v) / 255.0f;
}

struct AugmentedSample {
  Tensor image;
  Tensor mask;
  SampleInfo info;
};

/// 5 crops x 5 rotations. A pair whose mask comes out empty is replaced by the centre crop at that angle.
inline std::vector<AugmentedSample> augment(const Frame& frame, int frame_index, int crop_side) {
  const int raw = static_cast<int>(frame.image.shape().h);
  if (crop_side > raw) throw std::invalid_argument("augment: crop larger than the raw frame");
  std::vector<AugmentedSample> out;
  for (int ci = 0; ci < kCropsPerFrame; ++ci)
    for (int angle : kAngles) {
      auto make = [&](int use_crop) {
        const auto [y0, x0] = crop_origin(raw, crop_side, use_crop);
        AugmentedSample s;
        s.image = rotate(crop(frame.image, y0, x0, crop_side), angle, false);
        s.mask = rotate(crop(frame.mask, y0, x0, crop_side), angle, true);
        quantise(s.image);
        return s;
      };
      AugmentedSample s = make(ci);
      s.info = {frame_index, ci, angle, false};
      if (mask_count(s.mask) == 0) {
        s = make(4);
        s.info = {frame_index, ci, angle, true};
        if (mask_count(s.mask) == 0)
          throw DataError("augment: centre crop of frame " + std::to_string(frame_index) + " has an empty mask");
      }
      out.push_back(std::move(s));
    }
  return out;
}

inline std::string sample_file_name(const SampleInfo& info) {
  return "img_" + std::to_string(info.frame) + "_" + std::to_string(info.crop) + "_" + std::to_string(info.angle) + ".png";
}

/// Stratified fold assignment: per class, a seeded shuffle, then rank mod 5.
inline std::vector<int> stratified_folds(const std::vector<int>& labels, int classes, std::uint64_t seed,
                                         int folds = kFolds) {
  std::vector<int> out(labels.size(), 0);
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    Rng rng(derive_seed(seed, "folds", static_cast<std::uint64_t>(c)));
    rng.shuffle(idx);
    for (std::size_t r = 0; r < idx.size(); ++r) out[idx[r]] = static_cast<int>(r % static_cast<std::size_t>(folds));
  }
  return out;
}

/// Renders and augments every (class, frame) in memory; paths are relative to the variant root.
inline LabeledDataset build_flower_dataset(const FlowerSpec& spec, std::uint64_t seed, unsigned threads = 1) {
  const int classes = spec.class_count();
  const auto names = spec.class_names();
  std::vector<std::vector<AugmentedSample>> per_task(static_cast<std::size_t>(classes * spec.frames));
  parallel_for(per_task.size(), threads, [&](std::size_t task) {
    const int j = static_cast<int>(task) / spec.frames, t = static_cast<int>(task) % spec.frames;
    per_task[task] = augment(render_frame(spec, j, t), t, spec.crop_side);
  });
  LabeledDataset d;
  d.class_names = names;
  for (std::size_t task = 0; task < per_task.size(); ++task) {
    const int j = static_cast<int>(task) / spec.frames;
    for (auto& s : per_task[task]) {
      d.mask_paths.push_back("masks/" + names[static_cast<std::size_t>(j)] + "/" + sample_file_name(s.info));
      d.images.push_back(std::move(s.image));
      d.masks.push_back(std::move(s.mask));
      d.labels.push_back(j);
      d.info.push_back(s.info);
    }
  }
  d.folds = stratified_folds(d.labels, classes, seed);
  return d;
}

inline std::string image_path(const LabeledDataset& d, std::size_t i) {
  return d.class_names[static_cast<std::size_t>(d.labels[i])] + "/" + sample_file_name(d.info[i]);
}

/// Writes `<root>/<variant>/<class>/img_*.png`, `<root>/<variant>/masks/<class>/img_*.png` and manifest.json.
inline LabeledDataset generate_dataset(const FlowerSpec& spec, const std::filesystem::path& root, std::uint64_t seed,
                                       unsigned threads = 1) {
  const auto dir = root / std::string(to_string(spec.variant));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw DataError("generate_dataset: cannot create " + dir.string());
  LabeledDataset d = build_flower_dataset(spec, seed, threads);
  nlohmann::ordered_json m;
  m["generator"] = "relfeat-flowergen";
  m["version"] = kGeneratorVersion;
  m["variant"] = to_string(spec.variant);
  m["profile"] = spec.profile;
  m["seed"] = seed;
  m["raw_side"] = spec.raw_side;
  m["crop_side"] = spec.crop_side;
  m["frames"] = spec.frames;
  m["classes"] = d.class_names;
  m["folds"] = kFolds;
  auto& samples = m["samples"] = nlohmann::ordered_json::array();
  parallel_for(d.size(), threads, [&](std::size_t i) {
    io::write_png(dir / image_path(d, i), io::to_raster(d.images[i]));
    Tensor mask = d.masks[i];
    io::write_png(dir / d.mask_paths[i], io::to_raster(mask));
  });
  for (std::size_t i = 0; i < d.size(); ++i) {
    samples.push_back({{"image", image_path(d, i)},
                       {"mask", d.mask_paths[i]},
                       {"label", d.labels[i]},
                       {"fold", d.folds[i]},
                       {"frame", d.info[i].frame},
                       {"crop", d.info[i].crop},
                       {"angle", d.info[i].angle},
                       {"substituted", d.info[i].substituted}});
  }
  write_file(dir / "manifest.json", m.dump(1) + "\n");
  return d;
}

/// Reads a generated variant directory back (images, masks, labels, folds, provenance).
inline LabeledDataset load_flower_dataset(const std::filesystem::path& variant_dir, bool with_masks = true) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(variant_dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + (variant_dir / "manifest.json").string() + ": " + e.what());
  }
  LabeledDataset d;
  try {
    d.class_names = m.at("classes").get<std::vector<std::string>>();
    for (const auto& s : m.at("samples")) {
      d.images.push_back(io::from_raster(io::read_png(variant_dir / s.at("image").get<std::string>())));
      d.labels.push_back(s.at("label").get<int>());
      d.folds.push_back(s.at("fold").get<int>());
      d.mask_paths.push_back(s.at("mask").get<std::string>());
      d.info.push_back({s.at("frame").get<int>(), s.at("crop").get<int>(), s.at("angle").get<int>(),
                        s.at("substituted").get<bool>()});
      if (with_masks) {
        Tensor mask = io::from_raster(io::read_png(variant_dir / d.mask_paths.back()));
        for (float& v : mask.values()) v = v > 0.5f ? 1.0f : 0.0f;
        d.masks.push_back(std::move(mask));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + (variant_dir / "manifest.json").string() + ": " + e.what());
  }
  d.validate();
  return d;
}

}  // namespace relfeat
