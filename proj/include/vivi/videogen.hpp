#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vivi/common.hpp"

namespace vivi::videogen {

// Per-frame ground truth recorded at render time.
struct FrameMeta {
  float angle = 0.f;     // primary object rotation, radians in [0, 2pi)
  float cx = 0.f;        // primary object center, frame units [0,1]
  float cy = 0.f;
  float scale = 0.f;     // object radius, frame units
  float lighting = 1.f;  // multiplicative gain
};

struct VideoRecord {
  uint32_t video_id = 0;
  int64_t height = 0, width = 0, channels = 3;
  std::vector<float> frames;                  // (T,H,W,C), values on the u8/255 grid
  std::vector<int64_t> true_shot_boundaries;  // strictly increasing; first shot starts at 0
  int semantic_class = 0;                     // object shape family
  int object_count = 0;                       // 0 when unknown (e.g. loaded from shards)
  std::vector<FrameMeta> meta;                // empty when loaded from shards

  int64_t num_frames() const { return height * width * channels == 0
                                   ? 0
                                   : static_cast<int64_t>(frames.size()) /
                                         (height * width * channels); }
  const float* frame(int64_t t) const { return frames.data() + t * height * width * channels; }
  int64_t shot_count() const { return static_cast<int64_t>(true_shot_boundaries.size()) + 1; }
  // [begin, end) frame range of shot k under the stored boundaries
  std::pair<int64_t, int64_t> shot_range(int64_t k) const;
};

using Corpus = std::vector<VideoRecord>;

// One shot's scene parameters: smooth pose/lighting trajectories inside the
// shot, abrupt background changes between shots.
struct ShotParams {
  int64_t length = 0;
  double cx0 = 0.5, cy0 = 0.5, theta0 = 0.0, scale0 = 0.16;
  double dcx = 0.0, dcy = 0.0, dtheta = 0.0, dscale = 0.0;
  double light0 = 1.0, dlight = 0.0;
  double bg_hue = 0.0;
  double bg_level = 0.5;
  uint64_t bg_texture_seed = 0;
};

struct SceneSpec {
  int semantic_class = 0;
  int object_count = 1;
  double object_hue = 0.0;
  std::vector<std::array<double, 2>> extra_offsets;  // secondary object offsets
  std::vector<double> extra_scales;                  // relative to the primary scale
  std::vector<ShotParams> shots;
};

struct GenConfig {
  int64_t videos = 600;
  int num_classes = 8;
  int64_t shots_per_video = 4;   // per-video count varies uniformly by +/-1
  int64_t frames_per_shot = 12;
  int64_t frame_size = 32;
  int max_objects = 3;
  uint64_t id_base = 0;  // held-out corpora use a disjoint id range
  // trajectory magnitudes (per frame)
  double pos_drift = 0.012;
  double rot_drift = 0.045;
  double scale_drift = 0.003;
  double light_drift = 0.012;
  // families usable by the corpus (empty = all 8)
  std::vector<int> families;

  void validate() const;
};

inline constexpr int kNumFamilies = 8;
// Families whose orientation is recoverable from pixels over the full circle.
inline const std::vector<int> kAsymmetricFamilies = {1, 6};  // triangle, L-shape

// Deterministic per (config, seed): per-video RNG streams are derived from
// (seed, video_id), so generation order or parallelism cannot change output.
Corpus generate_corpus(const GenConfig& cfg, uint64_t seed);

// Scene sampling and rasterization, exposed for tests and the task builder.
SceneSpec make_scene(const GenConfig& cfg, uint64_t seed, uint32_t video_id,
                     int semantic_class);
// Raw (unquantized) H*W*C floats in [0,1].
std::vector<float> render_frame(const SceneSpec& spec, int64_t shot_index,
                                int64_t frame_index, int64_t frame_size);
FrameMeta frame_meta(const SceneSpec& spec, int64_t shot_index, int64_t frame_index);

void hsv_to_rgb(double h, double s, double v, double rgb[3]);
void rgb_to_hsv(double r, double g, double b, double hsv[3]);

}  // namespace vivi::videogen
