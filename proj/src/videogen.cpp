#include "vivi/videogen.hpp"

#include <algorithm>
#include <cmath>

#include "vivi/rng.hpp"

namespace vivi::videogen {

namespace {

constexpr double kTwoPi = 6.283185307179586;
constexpr double kFloorLevel = 0.03;  // residual level when lighting gain is 0

using Poly = std::vector<std::array<double, 2>>;

Poly regular_polygon(int sides, double radius, double phase) {
  Poly v;
  for (int i = 0; i < sides; ++i) {
    const double a = phase + kTwoPi * i / sides;
    v.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return v;
}

Poly star_polygon(int points, double r_outer, double r_inner) {
  Poly v;
  for (int i = 0; i < 2 * points; ++i) {
    const double a = kTwoPi * 0.25 + kTwoPi * i / (2 * points);
    const double r = (i % 2 == 0) ? r_outer : r_inner;
    v.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return v;
}

const Poly& family_polygon(int family) {
  static const std::vector<Poly> polys = [] {
    std::vector<Poly> p(kNumFamilies);
    p[1] = {{-0.95, -0.65}, {1.0, -0.35}, {-0.15, 0.95}};  // scalene triangle
    p[2] = {{-0.8, -0.8}, {0.8, -0.8}, {0.8, 0.8}, {-0.8, 0.8}};
    p[3] = regular_polygon(5, 1.0, kTwoPi * 0.25);
    p[4] = star_polygon(5, 1.0, 0.45);
    const double w = 0.34;
    p[5] = {{-w, -1}, {w, -1}, {w, -w}, {1, -w}, {1, w},
            {w, w},  {w, 1},  {-w, 1}, {-w, w}, {-1, w},
            {-1, -w}, {-w, -w}};
    p[6] = {{-0.85, -1}, {0.05, -1}, {0.05, 0.15}, {0.95, 0.15}, {0.95, 0.95}, {-0.85, 0.95}};
    p[7] = {{0, -1}, {0.6, 0}, {0, 1}, {-0.6, 0}};
    return p;
  }();
  return polys[static_cast<size_t>(family)];
}

double polygon_sdf(const Poly& v, double x, double y) {
  const size_t n = v.size();
  double d = 1e30;
  double s = 1.0;
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const double ex = v[i][0] - v[j][0], ey = v[i][1] - v[j][1];
    const double wx = x - v[j][0], wy = y - v[j][1];
    const double t = std::clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0);
    const double bx = wx - ex * t, by = wy - ey * t;
    d = std::min(d, bx * bx + by * by);
    const bool c1 = y >= v[j][1], c2 = y < v[i][1], c3 = ex * wy > ey * wx;
    if ((c1 && c2 && c3) || (!c1 && !c2 && !c3)) s = -s;
  }
  return s * std::sqrt(d);
}

double shape_sdf(int family, double x, double y) {
  if (family == 0) return std::sqrt(x * x + y * y) - 0.9;
  return polygon_sdf(family_polygon(family), x, y);
}

}  // namespace

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

void rgb_to_hsv(double r, double g, double b, double hsv[3]) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0) {
    if (mx == r) h = std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = (b - r) / d + 2.0;
    else h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
  }
  hsv[0] = h;
  hsv[1] = mx > 0 ? d / mx : 0.0;
  hsv[2] = mx;
}

std::pair<int64_t, int64_t> VideoRecord::shot_range(int64_t k) const {
  const int64_t begin = k == 0 ? 0 : true_shot_boundaries[static_cast<size_t>(k - 1)];
  const int64_t end = k + 1 <= static_cast<int64_t>(true_shot_boundaries.size())
                          ? true_shot_boundaries[static_cast<size_t>(k)]
                          : num_frames();
  return {begin, end};
}

void GenConfig::validate() const {
  if (videos < 1) throw ConfigError("videogen: need at least one video");
  if (num_classes < 2) throw ConfigError("videogen: need at least 2 classes");
  if (num_classes > kNumFamilies && families.empty()) {
    throw ConfigError(strcat_msg("videogen: at most ", kNumFamilies, " shape families"));
  }
  if (shots_per_video < 2) throw ConfigError("videogen: shots_per_video must be >= 2");
  if (frames_per_shot < 8) throw ConfigError("videogen: frames_per_shot must be >= 8");
  if (frame_size < 16) {
    throw ConfigError(strcat_msg("videogen: frame size ", frame_size,
                                 " cannot render the object (minimum 16)"));
  }
  if (max_objects < 1) throw ConfigError("videogen: max_objects must be >= 1");
  for (int f : families) {
    if (f < 0 || f >= kNumFamilies) {
      throw ConfigError(strcat_msg("videogen: unknown shape family ", f));
    }
  }
  if (!families.empty() && num_classes > static_cast<int>(families.size())) {
    throw ConfigError("videogen: num_classes exceeds the restricted family list");
  }
}

SceneSpec make_scene(const GenConfig& cfg, uint64_t seed, uint32_t video_id,
                     int semantic_class) {
  std::mt19937_64 rng = make_rng(seed, StreamTag::corpus, video_id);
  SceneSpec spec;
  spec.semantic_class = semantic_class;
  spec.object_count = static_cast<int>(uniform_int(rng, 1, cfg.max_objects));
  spec.object_hue = uniform(rng, 0.0, 1.0);
  for (int i = 1; i < spec.object_count; ++i) {
    const double ang = kTwoPi * (static_cast<double>(i) / spec.object_count) +
                       uniform(rng, -0.4, 0.4);
    const double rad = uniform(rng, 0.24, 0.32);
    spec.extra_offsets.push_back({rad * std::cos(ang), rad * std::sin(ang)});
    spec.extra_scales.push_back(uniform(rng, 0.55, 0.75));
  }
  const int64_t shots = std::max<int64_t>(2, cfg.shots_per_video + uniform_int(rng, -1, 1));
  double hue = uniform(rng, 0.0, 1.0);
  bool high = uniform(rng, 0.0, 1.0) < 0.5;
  for (int64_t k = 0; k < shots; ++k) {
    ShotParams sp;
    sp.length = cfg.frames_per_shot;
    sp.cx0 = uniform(rng, 0.38, 0.62);
    sp.cy0 = uniform(rng, 0.38, 0.62);
    sp.theta0 = uniform(rng, 0.0, kTwoPi);
    sp.scale0 = uniform(rng, 0.14, 0.20);
    sp.dcx = uniform(rng, -cfg.pos_drift, cfg.pos_drift);
    sp.dcy = uniform(rng, -cfg.pos_drift, cfg.pos_drift);
    sp.dtheta = uniform(rng, -cfg.rot_drift, cfg.rot_drift);
    sp.dscale = uniform(rng, -cfg.scale_drift, cfg.scale_drift);
    sp.light0 = uniform(rng, 0.8, 1.0);
    sp.dlight = uniform(rng, -cfg.light_drift, cfg.light_drift);
    // abrupt appearance change between consecutive shots: the hue advances by
    // at least a quarter turn and the brightness band flips
    sp.bg_hue = hue;
    sp.bg_level = (high ? uniform(rng, 0.55, 0.7) : uniform(rng, 0.25, 0.4));
    sp.bg_texture_seed = rng();
    hue = hue + 0.25 + uniform(rng, 0.0, 0.5);
    hue -= std::floor(hue);
    high = !high;
    spec.shots.push_back(sp);
  }
  return spec;
}

FrameMeta frame_meta(const SceneSpec& spec, int64_t shot_index, int64_t frame_index) {
  const ShotParams& sp = spec.shots[static_cast<size_t>(shot_index)];
  const double t = static_cast<double>(frame_index);
  FrameMeta m;
  double angle = std::fmod(sp.theta0 + sp.dtheta * t, kTwoPi);
  if (angle < 0) angle += kTwoPi;
  m.angle = static_cast<float>(angle);
  m.cx = static_cast<float>(sp.cx0 + sp.dcx * t);
  m.cy = static_cast<float>(sp.cy0 + sp.dcy * t);
  m.scale = static_cast<float>(std::max(0.08, sp.scale0 + sp.dscale * t));
  m.lighting = static_cast<float>(std::clamp(sp.light0 + sp.dlight * t, 0.0, 1.05));
  return m;
}

std::vector<float> render_frame(const SceneSpec& spec, int64_t shot_index,
                                int64_t frame_index, int64_t frame_size) {
  if (shot_index < 0 || shot_index >= static_cast<int64_t>(spec.shots.size())) {
    throw Error(strcat_msg("render_frame: shot ", shot_index, " out of range"));
  }
  const ShotParams& sp = spec.shots[static_cast<size_t>(shot_index)];
  if (frame_index < 0 || frame_index >= sp.length) {
    throw Error(strcat_msg("render_frame: frame ", frame_index, " out of range"));
  }
  const FrameMeta m = frame_meta(spec, shot_index, frame_index);
  const int64_t n = frame_size;

  // background: flat hue with a low-frequency sinusoid texture
  double bg_rgb[3];
  hsv_to_rgb(sp.bg_hue, 0.55, sp.bg_level, bg_rgb);
  std::mt19937_64 tex_rng(sp.bg_texture_seed);
  const double ax = uniform(tex_rng, 2.0, 5.5);
  const double by = uniform(tex_rng, 2.0, 5.5);
  const double phase = uniform(tex_rng, 0.0, kTwoPi);

  double obj_rgb[3];
  hsv_to_rgb(spec.object_hue, 0.85, 0.95, obj_rgb);

  // object poses: primary plus scaled offset copies, all sharing the angle
  struct Obj { double cx, cy, scale; };
  std::vector<Obj> objs;
  for (int i = spec.object_count - 1; i >= 1; --i) {
    objs.push_back({m.cx + spec.extra_offsets[static_cast<size_t>(i - 1)][0],
                    m.cy + spec.extra_offsets[static_cast<size_t>(i - 1)][1],
                    m.scale * spec.extra_scales[static_cast<size_t>(i - 1)]});
  }
  objs.push_back({m.cx, m.cy, m.scale});  // primary on top

  const double cos_t = std::cos(m.angle), sin_t = std::sin(m.angle);
  std::vector<float> out(static_cast<size_t>(n * n * 3));
  for (int64_t py = 0; py < n; ++py) {
    for (int64_t px = 0; px < n; ++px) {
      const double x = (px + 0.5) / static_cast<double>(n);
      const double y = (py + 0.5) / static_cast<double>(n);
      const double tex = 1.0 + 0.25 * std::sin(ax * kTwoPi * x + by * kTwoPi * y + phase);
      double c[3] = {bg_rgb[0] * tex, bg_rgb[1] * tex, bg_rgb[2] * tex};
      for (const Obj& o : objs) {
        const double rx = x - o.cx, ry = y - o.cy;
        // rotate into object frame and evaluate the family SDF
        const double qx = (cos_t * rx + sin_t * ry) / o.scale;
        const double qy = (-sin_t * rx + cos_t * ry) / o.scale;
        const double dist_px = shape_sdf(spec.semantic_class, qx, qy) * o.scale * n;
        const double alpha = std::clamp(0.5 - dist_px, 0.0, 1.0);
        if (alpha > 0) {
          for (int ch = 0; ch < 3; ++ch) c[ch] = c[ch] * (1 - alpha) + obj_rgb[ch] * alpha;
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(kFloorLevel + m.lighting * c[ch], 0.0, 1.0);
        out[static_cast<size_t>((py * n + px) * 3 + ch)] = static_cast<float>(v);
      }
    }
  }
  return out;
}

Corpus generate_corpus(const GenConfig& cfg, uint64_t seed) {
  cfg.validate();
  Corpus corpus;
  corpus.reserve(static_cast<size_t>(cfg.videos));
  for (int64_t i = 0; i < cfg.videos; ++i) {
    const uint32_t vid = static_cast<uint32_t>(cfg.id_base + static_cast<uint64_t>(i));
    const int cls_index = static_cast<int>(i % cfg.num_classes);
    const int family = cfg.families.empty() ? cls_index
                                            : cfg.families[static_cast<size_t>(cls_index)];
    SceneSpec spec = make_scene(cfg, seed, vid, family);

    VideoRecord rec;
    rec.video_id = vid;
    rec.height = cfg.frame_size;
    rec.width = cfg.frame_size;
    rec.channels = 3;
    rec.semantic_class = family;
    rec.object_count = spec.object_count;
    int64_t t = 0;
    for (size_t k = 0; k < spec.shots.size(); ++k) {
      for (int64_t f = 0; f < spec.shots[k].length; ++f) {
        std::vector<float> frame = render_frame(spec, static_cast<int64_t>(k), f,
                                                cfg.frame_size);
        // snap to the u8 grid so shard round trips are bit-exact
        for (float& v : frame) {
          v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
        }
        rec.frames.insert(rec.frames.end(), frame.begin(), frame.end());
        rec.meta.push_back(frame_meta(spec, static_cast<int64_t>(k), f));
        ++t;
      }
      if (k + 1 < spec.shots.size()) rec.true_shot_boundaries.push_back(t);
    }
    corpus.push_back(std::move(rec));
  }
  return corpus;
}

}  // namespace vivi::videogen
