// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Procedural clean images and parameterized degradations (noise, haze, rain,
// snow, low-light) applied singly or as ordered composites.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "siplkit/error.hpp"
#include "siplkit/image.hpp"
#include "siplkit/rng.hpp"

namespace siplkit {

enum class Kind { noise, haze, rain, snow, lowlight };

inline constexpr std::array<Kind, 5> kAllKinds{Kind::noise, Kind::haze, Kind::rain, Kind::snow, Kind::lowlight};

inline std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::noise: return "noise";
    case Kind::haze: return "haze";
    case Kind::rain: return "rain";
    case Kind::snow: return "snow";
    case Kind::lowlight: return "low";
  }
  throw UnknownKind("unknown degradation kind " + std::to_string(static_cast<int>(k)));
}

inline Kind parse_kind(std::string_view s) {
  if (s == "noise" || s == "n") return Kind::noise;
  if (s == "haze" || s == "h") return Kind::haze;
  if (s == "rain" || s == "r") return Kind::rain;
  if (s == "snow" || s == "s") return Kind::snow;
  if (s == "low" || s == "lowlight" || s == "l") return Kind::lowlight;
  throw UnknownKind("unknown degradation kind '" + std::string(s) + "'");
}

struct NoiseParams {
  double sigma = 25.0;  // 0–255 scale
};
struct HazeParams {
  double beta = 1.2;
  double airlight = 0.85;
};
struct RainParams {
  int streak_count = 40;
  double angle_deg = 45.0;
  double streak_intensity = 0.75;
};
struct SnowParams {
  int flake_count = 60;
  int flake_radius_px = 3;
  double intensity = 0.9;
};
struct LowlightParams {
  double gamma = 1.8;
  double scale = 0.7;
};

struct DegradationParams {
  NoiseParams noise;
  HazeParams haze;
  RainParams rain;
  SnowParams snow;
  LowlightParams lowlight;
};

struct DegradationSpec {
  std::vector<Kind> kinds;
  DegradationParams params;
  std::uint64_t seed = 0;

  bool has(Kind k) const { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); }

  /// Canonical task name, e.g. "low+haze" or "rain+noise25".
  std::string name() const {
    std::string out;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      if (i) out += '+';
      out += kind_name(kinds[i]);
      if (kinds[i] == Kind::noise) out += std::to_string(static_cast<int>(std::lround(params.noise.sigma)));
    }
    return out;
  }

  void validate() const {
    if (kinds.empty()) throw ConfigError("degradation spec has no kinds");
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      (void)kind_name(kinds[i]);
      for (std::size_t j = 0; j < i; ++j) {
        if (kinds[i] == kinds[j]) throw ConfigError("degradation kind listed twice in " + name());
      }
    }
    const auto& p = params;
    if (has(Kind::noise) && p.noise.sigma != 15.0 && p.noise.sigma != 25.0 && p.noise.sigma != 50.0) {
      throw ConfigError("noise sigma must be one of 15, 25, 50");
    }
    if (has(Kind::haze) && (p.haze.beta < 0.0 || p.haze.airlight < 0.7 || p.haze.airlight > 1.0)) {
      throw ConfigError("haze needs beta >= 0 and airlight in [0.7, 1.0]");
    }
    if (has(Kind::rain) && (p.rain.streak_count < 0 || p.rain.streak_intensity < 0.0 || p.rain.streak_intensity > 1.0)) {
      throw ConfigError("rain needs streak_count >= 0 and intensity in [0, 1]");
    }
    if (has(Kind::snow) && (p.snow.flake_count < 0 || p.snow.flake_radius_px < 1 || p.snow.intensity < 0.0 ||
                            p.snow.intensity > 1.0)) {
      throw ConfigError("snow needs flake_count >= 0, radius >= 1, intensity in [0, 1]");
    }
    if (has(Kind::lowlight) && (p.lowlight.gamma < 1.0 || p.lowlight.scale <= 0.0 || p.lowlight.scale > 1.0)) {
      throw ConfigError("lowlight needs gamma >= 1 and scale in (0, 1]");
    }
  }

  /// Same ordered kinds and parameters; seed ignored.
  bool same_recipe(const DegradationSpec& o) const { return name() == o.name(); }
};

/// Parses "noise25", "rain", "low+haze", "rain+noise50", ... into a template spec.
inline DegradationSpec parse_task(std::string_view text) {
  DegradationSpec spec;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('+', start), text.size());
    std::string_view tok = text.substr(start, end - start);
    if (tok.empty()) throw UnknownKind("empty degradation kind in '" + std::string(text) + "'");
    if (tok.starts_with("noise") && tok.size() > 5) {
      spec.kinds.push_back(Kind::noise);
      try {
        spec.params.noise.sigma = std::stod(std::string(tok.substr(5)));
      } catch (const std::exception&) {
        throw UnknownKind("unknown degradation kind '" + std::string(tok) + "'");
      }
    } else {
      spec.kinds.push_back(parse_kind(tok));
    }
    start = end + 1;
  }
  spec.validate();
  return spec;
}

/// The composite taxonomy: four singles then the seven listed combinations.
inline std::vector<DegradationSpec> cdd11_tasks() {
  std::vector<DegradationSpec> out;
  for (const char* t : {"low", "haze", "rain", "snow", "low+haze", "low+rain", "low+snow", "haze+rain", "haze+snow",
                        "low+haze+rain", "low+haze+snow"}) {
    out.push_back(parse_task(t));
  }
  return out;
}

/// Comma-separated task list; the token "cdd11" expands to the 11-task set.
inline std::vector<DegradationSpec> parse_task_list(std::string_view text) {
  std::vector<DegradationSpec> out;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto end = std::min(text.find(',', start), text.size());
    const std::string_view tok = text.substr(start, end - start);
    if (tok == "cdd11") {
      auto c = cdd11_tasks();
      out.insert(out.end(), c.begin(), c.end());
    } else if (!tok.empty()) {
      out.push_back(parse_task(tok));
    }
    start = end + 1;
  }
  if (out.empty()) throw ConfigError("empty task list");
  return out;
}

inline nlohmann::json params_to_json(const DegradationSpec& spec) {
  nlohmann::json j = nlohmann::json::object();
  const auto& p = spec.params;
  for (Kind k : spec.kinds) {
    switch (k) {
      case Kind::noise: j["noise"] = {{"sigma", p.noise.sigma}}; break;
      case Kind::haze: j["haze"] = {{"beta", p.haze.beta}, {"airlight", p.haze.airlight}}; break;
      case Kind::rain:
        j["rain"] = {{"streak_count", p.rain.streak_count},
                     {"angle_deg", p.rain.angle_deg},
                     {"streak_intensity", p.rain.streak_intensity}};
        break;
      case Kind::snow:
        j["snow"] = {{"flake_count", p.snow.flake_count},
                     {"flake_radius_px", p.snow.flake_radius_px},
                     {"intensity", p.snow.intensity}};
        break;
      case Kind::lowlight: j["low"] = {{"gamma", p.lowlight.gamma}, {"scale", p.lowlight.scale}}; break;
    }
  }
  return j;
}

inline DegradationSpec spec_from_json(const nlohmann::json& kinds, const nlohmann::json& params, std::uint64_t seed) {
  DegradationSpec s;
  for (const auto& k : kinds) s.kinds.push_back(parse_kind(k.get<std::string>()));
  auto& p = s.params;
  if (params.contains("noise")) p.noise.sigma = params["noise"].at("sigma").get<double>();
  if (params.contains("haze")) {
    p.haze.beta = params["haze"].at("beta").get<double>();
    p.haze.airlight = params["haze"].at("airlight").get<double>();
  }
  if (params.contains("rain")) {
    p.rain.streak_count = params["rain"].at("streak_count").get<int>();
    p.rain.angle_deg = params["rain"].at("angle_deg").get<double>();
    p.rain.streak_intensity = params["rain"].at("streak_intensity").get<double>();
  }
  if (params.contains("snow")) {
    p.snow.flake_count = params["snow"].at("flake_count").get<int>();
    p.snow.flake_radius_px = params["snow"].at("flake_radius_px").get<int>();
    p.snow.intensity = params["snow"].at("intensity").get<double>();
  }
  if (params.contains("low")) {
    p.lowlight.gamma = params["low"].at("gamma").get<double>();
    p.lowlight.scale = params["low"].at("scale").get<double>();
  }
  s.seed = seed;
  s.validate();
  return s;
}

namespace detail {

/// Smooth random field in [0,1]: a coarse random lattice upsampled with
/// smoothstep interpolation, then min-max normalized.
inline std::vector<double> smooth_field(Rng& rng, std::int64_t h, std::int64_t w, int cells) {
  const int gh = cells + 1, gw = cells + 1;
  std::vector<double> lattice(static_cast<std::size_t>(gh * gw));
  for (auto& v : lattice) v = rng.uniform();
  std::vector<double> f(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * cells;
    const int y0 = std::min(static_cast<int>(fy), cells - 1);
    double ty = fy - y0;
    ty = ty * ty * (3.0 - 2.0 * ty);
    for (std::int64_t x = 0; x < w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * cells;
      const int x0 = std::min(static_cast<int>(fx), cells - 1);
      double tx = fx - x0;
      tx = tx * tx * (3.0 - 2.0 * tx);
      const double a = lattice[y0 * gw + x0], b = lattice[y0 * gw + x0 + 1];
      const double c = lattice[(y0 + 1) * gw + x0], d = lattice[(y0 + 1) * gw + x0 + 1];
      f[y * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  }
  const auto [mn, mx] = std::minmax_element(f.begin(), f.end());
  const double lo = *mn, span = *mx - *mn;
  for (auto& v : f) v = span > 1e-12 ? (v - lo) / span : 0.5;
  return f;
}

inline double image_std(const Image& img) {
  double s = 0, s2 = 0;
  for (float v : img.values()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(img.size());
  const double m = s / n;
  return std::sqrt(std::max(0.0, s2 / n - m * m));
}

struct Shape2D {
  bool ellipse;
  double cx, cy, rx, ry, rot;
  std::vector<std::array<double, 2>> poly;
  std::array<double, 3> color;
  double alpha;

  bool contains(double x, double y) const {
    if (ellipse) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * std::cos(rot) + dy * std::sin(rot);
      const double v = -dx * std::sin(rot) + dy * std::cos(rot);
      return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    }
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      const auto& a = poly[i];
      const auto& b = poly[j];
      if (((a[1] > y) != (b[1] > y)) && (x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0])) in = !in;
    }
    return in;
  }
};

inline void composite_white(Image& img, const std::vector<double>& alpha) {
  const std::int64_t c = channels(img);
  for (std::size_t p = 0; p < alpha.size(); ++p) {
    const float a = static_cast<float>(alpha[p]);
    for (std::int64_t k = 0; k < c; ++k) {
      float& v = img[p * c + k];
      v = v * (1.0f - a) + a;
    }
  }
}

inline double bilinear(const std::vector<double>& f, std::int64_t h, std::int64_t w, double x, double y) {
  if (x < 0 || y < 0 || x > w - 1 || y > h - 1) return 0.0;
  const auto x0 = static_cast<std::int64_t>(x), y0 = static_cast<std::int64_t>(y);
  const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double tx = x - x0, ty = y - y0;
  return (f[y0 * w + x0] * (1 - tx) + f[y0 * w + x1] * tx) * (1 - ty) +
         (f[y1 * w + x0] * (1 - tx) + f[y1 * w + x1] * tx) * ty;
}

inline void apply_noise(Image& img, const NoiseParams& p, Rng& rng) {
  const double s = p.sigma / 255.0;
  for (auto& v : img.values()) v = static_cast<float>(v + s * rng.normal());
}

inline void apply_haze(Image& img, const HazeParams& p, Rng& rng) {
  const auto h = height(img), w = width(img), c = channels(img);
  const auto depth = smooth_field(rng, h, w, 3);
  const float a = static_cast<float>(p.airlight);
  for (std::int64_t i = 0; i < h * w; ++i) {
    const float t = static_cast<float>(std::exp(-p.beta * depth[static_cast<std::size_t>(i)]));
    for (std::int64_t k = 0; k < c; ++k) {
      float& v = img[i * c + k];
      v = v * t + a * (1.0f - t);
    }
  }
}

inline void apply_rain(Image& img, const RainParams& p, Rng& rng) {
  const auto h = height(img), w = width(img);
  std::vector<double> streaks(static_cast<std::size_t>(h * w), 0.0);
  const double deg = std::numbers::pi / 180.0;
  for (int i = 0; i < p.streak_count; ++i) {
    const double cx = rng.uniform(0, static_cast<double>(w));
    const double cy = rng.uniform(0, static_cast<double>(h));
    const double len = rng.uniform(4.0, 10.0);
    const double ang = (p.angle_deg + rng.uniform(-15.0, 15.0)) * deg;
    const double bright = rng.uniform(0.6, 1.0);
    const double dx = std::cos(ang), dy = std::sin(ang);
    for (double s = -len / 2; s <= len / 2; s += 0.5) {
      const auto px = static_cast<std::int64_t>(std::floor(cx + s * dx));
      const auto py = static_cast<std::int64_t>(std::floor(cy + s * dy));
      if (px >= 0 && px < w && py >= 0 && py < h) {
        auto& m = streaks[static_cast<std::size_t>(py * w + px)];
        m = std::max(m, bright);
      }
    }
  }
  // Motion blur, length-7 line kernel along the dominant angle.
  const double dx = std::cos(p.angle_deg * deg), dy = std::sin(p.angle_deg * deg);
  std::vector<double> blurred(streaks.size(), 0.0);
  double peak = 0.0;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -3; j <= 3; ++j) acc += bilinear(streaks, h, w, x + j * dx, y + j * dy);
      blurred[y * w + x] = acc / 7.0;
      peak = std::max(peak, blurred[y * w + x]);
    }
  }
  if (peak <= 0.0) return;
  for (auto& v : blurred) v = std::min(1.0, v / peak) * p.streak_intensity;
  composite_white(img, blurred);
}

inline void apply_snow(Image& img, const SnowParams& p, Rng& rng) {
  const auto h = height(img), w = width(img);
  std::vector<double> alpha(static_cast<std::size_t>(h * w), 0.0);
  for (int i = 0; i < p.flake_count; ++i) {
    const double cx = rng.uniform(0, static_cast<double>(w));
    const double cy = rng.uniform(0, static_cast<double>(h));
    const int r = rng.uniform_int(1, p.flake_radius_px);
    const double bright = rng.uniform(0.7, 1.0) * p.intensity;
    for (auto y = static_cast<std::int64_t>(cy) - r - 1; y <= static_cast<std::int64_t>(cy) + r + 1; ++y) {
      for (auto x = static_cast<std::int64_t>(cx) - r - 1; x <= static_cast<std::int64_t>(cx) + r + 1; ++x) {
        if (x < 0 || x >= w || y < 0 || y >= h) continue;
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        const double cov = std::clamp(r + 0.5 - d, 0.0, 1.0);
        auto& a = alpha[static_cast<std::size_t>(y * w + x)];
        a = std::max(a, cov * bright);
      }
    }
  }
  composite_white(img, alpha);
}

inline void apply_lowlight(Image& img, const LowlightParams& p) {
  for (auto& v : img.values()) {
    v = static_cast<float>(std::pow(static_cast<double>(v) * p.scale, p.gamma));
  }
}

}  // namespace detail

/// Procedural clean image: smooth two-colour gradient, random ellipses and
/// polygons, and band-limited sinusoidal texture. Pixel std is kept >= 0.05 by
/// growing the texture amplitude.
inline Image gen_clean(std::uint64_t seed, std::int64_t h, std::int64_t w) {
  if (h < 16 || w < 16) throw ShapeError("gen_clean: image must be at least 16×16");
  Rng rng(derive_seed(seed, "clean"));
  std::array<double, 3> c0{}, c1{};
  for (auto& v : c0) v = rng.uniform(0.15, 0.85);
  for (auto& v : c1) v = rng.uniform(0.15, 0.85);
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<detail::Shape2D> shapes;
  const int n_shapes = rng.uniform_int(3, 6);
  const double size = static_cast<double>(std::min(h, w));
  for (int i = 0; i < n_shapes; ++i) {
    detail::Shape2D s{};
    s.ellipse = rng.uniform() < 0.5;
    s.cx = rng.uniform(0.0, static_cast<double>(w));
    s.cy = rng.uniform(0.0, static_cast<double>(h));
    s.rx = rng.uniform(0.08, 0.35) * size;
    s.ry = rng.uniform(0.08, 0.35) * size;
    s.rot = rng.uniform(0.0, std::numbers::pi);
    if (!s.ellipse) {
      const int nv = rng.uniform_int(3, 5);
      std::vector<double> angles(static_cast<std::size_t>(nv));
      for (auto& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      std::sort(angles.begin(), angles.end());
      for (double a : angles) {
        const double r = rng.uniform(0.4, 1.0) * s.rx;
        s.poly.push_back({s.cx + r * std::cos(a), s.cy + r * std::sin(a)});
      }
    }
    for (auto& v : s.color) v = rng.uniform(0.05, 0.95);
    s.alpha = rng.uniform(0.6, 1.0);
    shapes.push_back(std::move(s));
  }

  struct Wave {
    double fx, fy, phase;
    std::array<double, 3> weight;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 6; ++i) {
    const double f = rng.uniform(2.0, 8.0);
    const double ang = rng.uniform(0.0, std::numbers::pi);
    Wave wv{f * std::cos(ang) / static_cast<double>(w), f * std::sin(ang) / static_cast<double>(h),
            rng.uniform(0.0, 2.0 * std::numbers::pi), {}};
    for (auto& v : wv.weight) v = rng.uniform(0.5, 1.0);
    waves.push_back(wv);
  }
  double amplitude = rng.uniform(0.03, 0.08);

  Image base(Shape{h, w, 3});
  Image texture(Shape{h, w, 3});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double u = (x + 0.5) / static_cast<double>(w) - 0.5;
      const double v = (y + 0.5) / static_cast<double>(h) - 0.5;
      const double t = std::clamp(u * std::cos(theta) + v * std::sin(theta) + 0.5, 0.0, 1.0);
      std::array<double, 3> px{};
      for (int k = 0; k < 3; ++k) px[k] = c0[k] * (1 - t) + c1[k] * t;
      for (const auto& s : shapes) {
        // 2×2 supersampled coverage
        int hits = 0;
        for (double oy : {0.25, 0.75}) {
          for (double ox : {0.25, 0.75}) hits += s.contains(x + ox, y + oy) ? 1 : 0;
        }
        const double a = s.alpha * hits / 4.0;
        for (int k = 0; k < 3; ++k) px[k] = px[k] * (1 - a) + s.color[k] * a;
      }
      std::array<double, 3> tex{};
      for (const auto& wv : waves) {
        const double val = std::sin(2.0 * std::numbers::pi * (wv.fx * x + wv.fy * y) + wv.phase) / waves.size();
        for (int k = 0; k < 3; ++k) tex[k] += wv.weight[k] * val;
      }
      for (int k = 0; k < 3; ++k) {
        base[(y * w + x) * 3 + k] = static_cast<float>(px[k]);
        texture[(y * w + x) * 3 + k] = static_cast<float>(tex[k]);
      }
    }
  }
  Image img(base.shape());
  for (int attempt = 0; attempt < 12; ++attempt) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = std::clamp(static_cast<float>(base[i] + amplitude * texture[i]), 0.0f, 1.0f);
    }
    if (detail::image_std(img) >= 0.05) break;
    amplitude *= 1.5;
  }
  return img;
}

/// Applies spec.kinds in listed order, clipping to [0,1] after each kind.
/// Each kind draws from its own substream of spec.seed.
inline Image apply_degradation(const Image& clean, const DegradationSpec& spec) {
  require_image(clean, "apply_degradation");
  spec.validate();
  Image img = clean;
  for (std::size_t i = 0; i < spec.kinds.size(); ++i) {
    const Kind k = spec.kinds[i];
    Rng rng(derive_seed(spec.seed, kind_name(k), i));
    switch (k) {
      case Kind::noise: detail::apply_noise(img, spec.params.noise, rng); break;
      case Kind::haze: detail::apply_haze(img, spec.params.haze, rng); break;
      case Kind::rain: detail::apply_rain(img, spec.params.rain, rng); break;
      case Kind::snow: detail::apply_snow(img, spec.params.snow, rng); break;
      case Kind::lowlight: detail::apply_lowlight(img, spec.params.lowlight); break;
      default: throw UnknownKind("unknown degradation kind " + std::to_string(static_cast<int>(k)));
    }
    img = clip01(std::move(img));
  }
  return img;
}

/// Noise-only variant without the final clip, for statistics on the raw draw.
inline Image add_gaussian_noise_unclipped(const Image& clean, double sigma_255, std::uint64_t seed) {
  Image img = clean;
  Rng rng(derive_seed(seed, "noise", 0));
  detail::apply_noise(img, NoiseParams{sigma_255}, rng);
  return img;
}

struct SamplePair {
  Image clean;
  Image degraded;
  DegradationSpec spec;
  int task_id = 0;
};

}  // namespace siplkit
