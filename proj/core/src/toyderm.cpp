#include "dermaug/toyderm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "dermaug/error.hpp"
#include "dermaug/hashing.hpp"
#include "dermaug/image_io.hpp"

namespace dermaug {
namespace {

constexpr double kPi = std::numbers::pi;

struct Rgb {
  double r, g, b;
};

double luma(const Rgb& c) { return 0.2126 * c.r + 0.7152 * c.g + 0.0722 * c.b; }

class Canvas {
 public:
  explicit Canvas(int size) : size_(size), px_(static_cast<std::size_t>(size) * size * 3, 0.0) {}

  int size() const { return size_; }
  double& at(int ch, int y, int x) {
    return px_[(static_cast<std::size_t>(ch) * size_ + y) * size_ + x];
  }

  torch::Tensor to_tensor() const {
    auto t = torch::empty({3, size_, size_}, torch::kFloat32);
    auto* out = t.data_ptr<float>();
    for (std::size_t i = 0; i < px_.size(); ++i) {
      out[i] = static_cast<float>(std::clamp(px_[i], 0.0, 1.0));
    }
    return t;
  }

 private:
  int size_;
  std::vector<double> px_;
};

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

/// Soft inside-ness from a signed distance (negative inside), ~1 px edge.
double soft(double signed_distance) { return 1.0 - smoothstep(-0.75, 0.75, signed_distance); }

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax;
  const double vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0 ? std::clamp(((px - ax) * vx + (py - ay) * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = px - (ax + t * vx);
  const double dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct Blob {
  double x, y, r;
};

/// Per-condition lesion geometry and texture, sampled once per image.
struct LesionSpec {
  Condition condition;
  double cx, cy, scale, theta, phase;
  std::vector<Blob> blobs;
  std::vector<std::pair<double, double>> path;
};

LesionSpec sample_spec(Condition condition, double unit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  LesionSpec s{condition, 32.0 * unit + uni(-4, 4) * unit, 32.0 * unit + uni(-4, 4) * unit,
               uni(0.85, 1.15), uni(0.0, 2.0 * kPi), uni(0.0, 2.0 * kPi), {}, {}};
  switch (condition) {
    case Condition::Folliculitis: {
      const int n = 9 + static_cast<int>(u01(rng) * 5);
      for (int i = 0; i < n; ++i) {
        const double a = uni(0, 2 * kPi);
        const double d = std::sqrt(u01(rng)) * 18.0 * unit;
        s.blobs.push_back({s.cx + d * std::cos(a), s.cy + d * std::sin(a), uni(2.2, 3.2) * unit});
      }
      break;
    }
    case Condition::PrurigoNodularis: {
      const int n = 4 + static_cast<int>(u01(rng) * 3);
      for (int i = 0; i < n; ++i) {
        const double a = uni(0, 2 * kPi);
        const double d = std::sqrt(u01(rng)) * 15.0 * unit;
        s.blobs.push_back({s.cx + d * std::cos(a), s.cy + d * std::sin(a), uni(4.2, 5.8) * unit});
      }
      break;
    }
    case Condition::NematodeInfection: {
      const double half = 19.0 * unit * s.scale;
      const double amp = uni(4.5, 6.5) * unit;
      const double waves = uni(1.6, 2.2);
      for (int i = 0; i <= 48; ++i) {
        const double u = -1.0 + 2.0 * i / 48.0;
        const double lx = u * half;
        const double ly = amp * std::sin(waves * kPi * u + s.phase);
        s.path.emplace_back(s.cx + lx * std::cos(s.theta) - ly * std::sin(s.theta),
                            s.cy + lx * std::sin(s.theta) + ly * std::cos(s.theta));
      }
      break;
    }
    default:
      break;
  }
  return s;
}

/// Lesion coverage m in [0,1] and texture value t in [0,1] at pixel (x, y).
std::pair<double, double> lesion_at(const LesionSpec& s, double x, double y, double unit) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  const double r = std::sqrt(dx * dx + dy * dy);
  const double phi = std::atan2(dy, dx);
  // Rotated coordinates for oriented textures.
  const double rx = dx * std::cos(s.theta) + dy * std::sin(s.theta);
  const double ry = -dx * std::sin(s.theta) + dy * std::cos(s.theta);
  switch (s.condition) {
    case Condition::BasalCellCarcinoma: {
      const double radius = 13.0 * unit * s.scale;
      const double m = soft(r - radius);
      // Pearly rolled border with a darker central depression.
      const double rim = std::exp(-std::pow((r - 0.8 * radius) / (2.0 * unit), 2));
      const double centre = std::exp(-std::pow(r / (4.0 * unit), 2));
      return {m, std::clamp(0.45 + 0.55 * rim - 0.4 * centre, 0.0, 1.0)};
    }
    case Condition::Folliculitis: {
      double m = 0.0;
      double t = 0.0;
      for (const auto& b : s.blobs) {
        const double d = std::hypot(x - b.x, y - b.y);
        m = std::max(m, soft(d - b.r));
        t = std::max(t, std::exp(-std::pow(d / (0.9 * unit), 2)));  // pustule head
      }
      return {m, 0.35 + 0.65 * t};
    }
    case Condition::NematodeInfection: {
      double d = 1e9;
      for (std::size_t i = 1; i < s.path.size(); ++i) {
        d = std::min(d, segment_distance(x, y, s.path[i - 1].first, s.path[i - 1].second,
                                         s.path[i].first, s.path[i].second));
      }
      const double m = soft(d - 2.4 * unit);
      return {m, 0.5 + 0.5 * std::cos(d / unit * 1.8)};
    }
    case Condition::NeutrophilicDermatoses: {
      const double mid = 13.0 * unit * s.scale;
      const double half_width = 3.2 * unit;
      const double m = soft(std::abs(r - mid) - half_width);
      return {m, 0.5 + 0.5 * std::cos(6.0 * phi + s.phase)};
    }
    case Condition::PrurigoNodularis: {
      double m = 0.0;
      double t = 0.0;
      for (const auto& b : s.blobs) {
        const double d = std::hypot(x - b.x, y - b.y);
        m = std::max(m, soft(d - b.r));
        t = std::max(t, 1.0 - std::exp(-std::pow(d / (1.8 * unit), 2)));  // dark excoriated core
      }
      return {m, 0.2 + 0.8 * t};
    }
    case Condition::Psoriasis: {
      const double ex = rx / (19.0 * unit * s.scale);
      const double ey = ry / (11.0 * unit * s.scale);
      const double boundary = 1.0 + 0.12 * std::sin(5.0 * phi + s.phase);
      const double e = std::sqrt(ex * ex + ey * ey);
      const double m = soft((e - boundary) * 11.0 * unit);
      // Silvery scale in bands across the plaque.
      return {m, 0.5 + 0.5 * std::cos(0.95 * ry / unit + s.phase)};
    }
    case Condition::SquamousCellCarcinoma: {
      const double radius = 13.0 * unit * s.scale * (1.0 + 0.32 * std::sin(7.0 * phi + s.phase));
      const double m = soft(r - radius);
      const double checker = std::cos(0.55 * rx / unit) * std::cos(0.55 * ry / unit);
      const double crust = std::exp(-std::pow(r / (5.0 * unit), 2));
      return {m, std::clamp(0.5 + 0.4 * checker - 0.35 * crust, 0.0, 1.0)};
    }
  }
  return {0.0, 0.0};
}

Rgb pigment(Condition c) {
  switch (c) {
    case Condition::BasalCellCarcinoma:
      return {0.78, 0.52, 0.55};
    case Condition::Folliculitis:
      return {0.85, 0.30, 0.30};
    case Condition::NematodeInfection:
      return {0.70, 0.25, 0.32};
    case Condition::NeutrophilicDermatoses:
      return {0.80, 0.22, 0.28};
    case Condition::PrurigoNodularis:
      return {0.50, 0.28, 0.22};
    case Condition::Psoriasis:
      return {0.82, 0.38, 0.36};
    case Condition::SquamousCellCarcinoma:
      return {0.62, 0.36, 0.28};
  }
  return {0.7, 0.3, 0.3};
}

Rgb highlight(Condition c) {
  switch (c) {
    case Condition::Folliculitis:
      return {0.95, 0.92, 0.75};  // pustule
    case Condition::Psoriasis:
      return {0.92, 0.90, 0.88};  // silvery scale
    case Condition::BasalCellCarcinoma:
      return {0.95, 0.85, 0.85};  // pearly
    default:
      return {0.06, 0.02, 0.015};  // crust
  }
}

}  // namespace

void ToyDermConfig::validate() const {
  if (n_classes < 1 || n_classes > static_cast<int>(kConditionCount)) {
    throw ValidationError("toyderm: n_classes must be in [1, 7]");
  }
  if (per_class_light < 0 || per_class_dark < 0) throw ValidationError("toyderm: counts must be >= 0");
  if (image_size < 16) throw ValidationError("toyderm: image_size must be >= 16");
  for (const auto& range : {light_luminance_range, dark_luminance_range}) {
    if (!(range[0] >= 0.0 && range[0] <= range[1] && range[1] <= 1.0)) {
      throw ValidationError("toyderm: luminance range must satisfy 0 <= lo <= hi <= 1");
    }
  }
  const bool disjoint = dark_luminance_range[1] < light_luminance_range[0] ||
                        light_luminance_range[1] < dark_luminance_range[0];
  if (!disjoint) throw ValidationError("toyderm: light and dark luminance ranges overlap");
}

void to_json(nlohmann::json& j, const ToyDermConfig& c) {
  j = {{"n_classes", c.n_classes},
       {"per_class_light", c.per_class_light},
       {"per_class_dark", c.per_class_dark},
       {"image_size", c.image_size},
       {"light_luminance_range", c.light_luminance_range},
       {"dark_luminance_range", c.dark_luminance_range},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ToyDermConfig& c) {
  ToyDermConfig d;
  c.n_classes = j.value("n_classes", d.n_classes);
  c.per_class_light = j.value("per_class_light", d.per_class_light);
  c.per_class_dark = j.value("per_class_dark", d.per_class_dark);
  c.image_size = j.value("image_size", d.image_size);
  c.light_luminance_range = j.value("light_luminance_range", d.light_luminance_range);
  c.dark_luminance_range = j.value("dark_luminance_range", d.dark_luminance_range);
  c.seed = j.value("seed", d.seed);
}

torch::Tensor render_toyderm_image(Condition condition, std::uint64_t seed, int image_size,
                                   double luminance_lo, double luminance_hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double unit = image_size / 64.0;

  const double lum = luminance_lo + (luminance_hi - luminance_lo) * u01(rng);
  // Warm skin tint scaled to the target luminance.
  const Rgb tint{1.10 + 0.06 * (u01(rng) - 0.5), 0.95, 0.80 + 0.06 * (u01(rng) - 0.5)};
  const double k = lum / luma(tint);
  const Rgb skin{tint.r * k, tint.g * k, tint.b * k};

  // Faint skin texture: two low-frequency waves.
  const double wa = u01(rng) * 2 * kPi;
  const double wb = u01(rng) * 2 * kPi;

  const LesionSpec spec = sample_spec(condition, unit, rng);
  // Lesion pigment is darker than either skin band.
  const Rgb p0 = pigment(condition);
  const double pk = 0.08 / luma(p0);
  const Rgb p{p0.r * pk, p0.g * pk, p0.b * pk};
  const Rgb h = highlight(condition);
  const double opacity = 0.95;
  const bool highlight_bright = luma(h) > 0.5;

  Canvas canvas(image_size);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double fx = x + 0.5;
      const double fy = y + 0.5;
      const double grain = 0.012 * std::sin(0.21 * fx / unit + wa) * std::cos(0.17 * fy / unit + wb);
      Rgb bg{skin.r * (1 + grain), skin.g * (1 + grain), skin.b * (1 + grain)};
      const auto [m, t] = lesion_at(spec, fx, fy, unit);
      const double tex = highlight_bright ? std::max(0.0, t - 0.5) * 2.0 : std::max(0.0, 0.5 - t) * 2.0;
      const double base = highlight_bright ? 0.8 + 0.2 * t : 0.75 + 0.25 * t;
      Rgb lesion{p.r * base * (1 - tex) + h.r * tex, p.g * base * (1 - tex) + h.g * tex,
                 p.b * base * (1 - tex) + h.b * tex};
      const double a = opacity * m;
      canvas.at(0, y, x) = bg.r * (1 - a) + lesion.r * a;
      canvas.at(1, y, x) = bg.g * (1 - a) + lesion.g * a;
      canvas.at(2, y, x) = bg.b * (1 - a) + lesion.b * a;
    }
  }
  return canvas.to_tensor();
}

DatasetManifest generate_toyderm(const ToyDermConfig& config, const std::filesystem::path& out_dir,
                                 const std::string& source_id) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw StageError("toyderm: cannot create " + (out_dir / "images").string() + ": " + ec.message());

  DatasetManifest manifest{source_id, {}};
  std::uint64_t index = 0;
  for (int k = 0; k < config.n_classes; ++k) {
    const Condition condition = kAllConditions[static_cast<std::size_t>(k)];
    for (const SkinGroup group : {SkinGroup::Light, SkinGroup::Dark}) {
      const int count = group == SkinGroup::Light ? config.per_class_light : config.per_class_dark;
      const auto& range =
          group == SkinGroup::Light ? config.light_luminance_range : config.dark_luminance_range;
      for (int i = 0; i < count; ++i, ++index) {
        const std::uint64_t seed = derive_seed(config.seed, "toyderm", index);
        const Fst fst = group == SkinGroup::Light ? (seed % 2 == 0 ? Fst::I : Fst::II)
                                                  : (seed % 2 == 0 ? Fst::V : Fst::VI);
        char suffix[16];
        std::snprintf(suffix, sizeof(suffix), "%03d", i);
        const std::string id = "toy-" + std::string(condition_slug(condition)) + "-" +
                               std::string(group_name(group)) + "-" + suffix;
        const auto path = out_dir / "images" / (id + ".png");
        write_png(path, render_toyderm_image(condition, seed, config.image_size, range[0], range[1]));
        manifest.records.push_back({id, path.lexically_normal(), condition, fst});
      }
    }
  }
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace dermaug

namespace dermaug {

DatasetManifest generate_toyderm(const CountTable& counts, const ToyDermConfig& style,
                                 const std::filesystem::path& out_dir, const std::string& source_id) {
  style.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw StageError("toyderm: cannot create " + (out_dir / "images").string() + ": " + ec.message());

  DatasetManifest manifest{source_id, {}};
  std::uint64_t index = 0;
  for (const auto condition : kAllConditions) {
    for (const auto fst : kAllFst) {
      const auto it = counts.find({condition, fst});
      const std::size_t n = it == counts.end() ? 0 : it->second;
      const auto& range =
          group_of(fst) == SkinGroup::Light ? style.light_luminance_range : style.dark_luminance_range;
      for (std::size_t i = 0; i < n; ++i, ++index) {
        const std::uint64_t seed = derive_seed(style.seed, "toyderm-counts", index);
        char suffix[16];
        std::snprintf(suffix, sizeof(suffix), "%04zu", i);
        const std::string id = "toy-" + std::string(condition_slug(condition)) + "-fst" +
                               std::string(fst_name(fst)) + "-" + suffix;
        const auto path = out_dir / "images" / (id + ".png");
        write_png(path, render_toyderm_image(condition, seed, style.image_size, range[0], range[1]));
        manifest.records.push_back({id, path.lexically_normal(), condition, fst});
      }
    }
  }
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace dermaug
