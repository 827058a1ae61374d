#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vivi/videogen.hpp"

namespace vivi::pipe {

using videogen::Corpus;
using videogen::VideoRecord;

// Concatenated per-channel 16-bin histograms (48 bins), L1-normalized.
std::vector<double> frame_histogram(const float* frame, int64_t h, int64_t w, int64_t c);

double histogram_l1_distance(const std::vector<double>& a, const std::vector<double>& b);

// Index t is a boundary iff the L1 distance between the histograms of frames
// t-1 and t exceeds the threshold; boundaries within 1 frame of the previous
// accepted one are suppressed (minimum shot length 2).
std::vector<int64_t> detect_shot_boundaries(const VideoRecord& video,
                                            double threshold = 0.3);

struct BoundaryScore {
  int64_t true_positives = 0, false_positives = 0, false_negatives = 0;
  double precision() const;
  double recall() const;
  double f1() const;
};
// Exact-index match scoring of detected vs ground-truth boundaries.
BoundaryScore score_boundaries(const std::vector<int64_t>& detected,
                               const std::vector<int64_t>& truth);

// --- sharded corpus storage ---
// Per-shard binary layout: magic "VIVS", u32 version, u32 record count, then
// records (u32 video_id, u16 H, u16 W, u16 T, u8 C, u16 boundary count,
// boundaries as u16 list, u16 label, frames as raw RGB 8-bit row-major).
// A sidecar text index (index.txt) lists "video_id shard offset" lines.
void write_shards(const Corpus& corpus, const std::string& dir, int64_t videos_per_shard);
Corpus read_shards(const std::string& dir);
// Random access through the index; touches only the owning shard.
VideoRecord read_video(const std::string& dir, uint32_t video_id);

// --- hierarchical batch sampling ---

struct BatchSpec {
  int64_t n_videos = 8;   // N
  int64_t k_shots = 4;    // K
  int64_t l_frames = 8;   // L
  int64_t nk_product = 32;

  void validate() const;  // N*K must equal nk_product exactly
};

struct HierBatch {
  int64_t n = 0, k = 0, l = 0, h = 0, w = 0, c = 0;
  std::vector<float> frames;          // (N,K,L,H,W,C)
  std::vector<int> exemplar_class;    // per (n,k) slot: n*K + k
  std::vector<uint32_t> video_ids;    // per n
  std::vector<int> video_class;       // semantic class per n
  std::vector<int64_t> shot_indices;  // absolute shot index per (n,k)

  int64_t frame_count() const { return n * k * l; }
};

// Selects N distinct eligible videos, K consecutive shots per video and L
// consecutive frames per shot. Videos without K consecutive shots of length
// >= L are never selected.
HierBatch sample_hierarchical_batch(const Corpus& corpus, const BatchSpec& spec,
                                    std::mt19937_64& rng);

// Indices of corpus entries eligible for the spec (exposed for tests).
std::vector<int64_t> eligible_videos(const Corpus& corpus, const BatchSpec& spec);

// --- augmentation ---

struct AugmentConfig {
  int64_t exemplar_m = 8;      // M augmented exemplar members per shot
  double crop_min = 0.7;       // crop side-scale range; 1.0/1.0 disables
  double crop_max = 1.0;
  double rotation_deg = 10.0;  // jitter range in degrees; 0 disables
  double brightness = 0.15;    // additive range; 0 disables
  double contrast = 0.15;      // multiplicative range around mid-gray
  double hue = 0.05;           // hue-shift range in turns; 0 disables
  bool hsv_randomization = false;  // extra global HSV shift (co-training)

  void validate() const;
  bool identity() const;
};

// Per-frame independent crop-and-resize, small rotation and color jitter.
// Output shape equals input shape; values stay in [0,1]. A fully degenerate
// config returns the input bit-for-bit.
void augment(float* frames, int64_t count, int64_t h, int64_t w, int64_t c,
             const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace vivi::pipe
