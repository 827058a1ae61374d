#include "vivi/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "vivi/rng.hpp"

namespace vivi::pipe {

using videogen::hsv_to_rgb;
using videogen::rgb_to_hsv;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Histograms and shot detection
// ---------------------------------------------------------------------------

std::vector<double> frame_histogram(const float* frame, int64_t h, int64_t w, int64_t c) {
  constexpr int kBins = 16;
  std::vector<double> hist(static_cast<size_t>(kBins * c), 0.0);
  const int64_t pixels = h * w;
  for (int64_t p = 0; p < pixels; ++p) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float v = frame[p * c + ch];
      int bin = static_cast<int>(v * kBins);
      bin = std::clamp(bin, 0, kBins - 1);
      hist[static_cast<size_t>(ch * kBins + bin)] += 1.0;
    }
  }
  const double total = static_cast<double>(pixels * c);
  for (auto& v : hist) v /= total;
  return hist;
}

double histogram_l1_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("histogram_l1_distance: size mismatch");
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

std::vector<int64_t> detect_shot_boundaries(const VideoRecord& video, double threshold) {
  const int64_t t_total = video.num_frames();
  if (t_total < 2) throw Error("detect_shot_boundaries: need at least 2 frames");
  if (threshold <= 0.0) throw ConfigError("detect_shot_boundaries: threshold must be > 0");
  std::vector<int64_t> out;
  std::vector<double> prev = frame_histogram(video.frame(0), video.height, video.width,
                                             video.channels);
  int64_t last_accepted = 0;  // implicit start of the first shot
  for (int64_t t = 1; t < t_total; ++t) {
    std::vector<double> cur = frame_histogram(video.frame(t), video.height, video.width,
                                              video.channels);
    if (histogram_l1_distance(prev, cur) > threshold && t - last_accepted > 1) {
      out.push_back(t);
      last_accepted = t;
    }
    prev = std::move(cur);
  }
  return out;
}

double BoundaryScore::precision() const {
  const int64_t d = true_positives + false_positives;
  return d == 0 ? 0.0 : static_cast<double>(true_positives) / static_cast<double>(d);
}

double BoundaryScore::recall() const {
  const int64_t d = true_positives + false_negatives;
  return d == 0 ? 0.0 : static_cast<double>(true_positives) / static_cast<double>(d);
}

double BoundaryScore::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

BoundaryScore score_boundaries(const std::vector<int64_t>& detected,
                               const std::vector<int64_t>& truth) {
  BoundaryScore s;
  size_t i = 0, j = 0;
  while (i < detected.size() && j < truth.size()) {
    if (detected[i] == truth[j]) {
      ++s.true_positives;
      ++i;
      ++j;
    } else if (detected[i] < truth[j]) {
      ++s.false_positives;
      ++i;
    } else {
      ++s.false_negatives;
      ++j;
    }
  }
  s.false_positives += static_cast<int64_t>(detected.size() - i);
  s.false_negatives += static_cast<int64_t>(truth.size() - j);
  return s;
}

// ---------------------------------------------------------------------------
// Shards
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'V', 'I', 'V', 'S'};
constexpr uint32_t kShardVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
  // little-endian on all supported targets
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& ctx) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IoError(strcat_msg("truncated shard record: ", ctx));
  }
  return v;
}

std::string shard_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "shard-%05lld.vivs", static_cast<long long>(index));
  return buf;
}

void write_record(std::ostream& os, const VideoRecord& v) {
  if (v.num_frames() > 0xFFFF || v.height > 0xFFFF || v.width > 0xFFFF ||
      v.channels > 0xFF || v.true_shot_boundaries.size() > 0xFFFF ||
      v.semantic_class > 0xFFFF || v.semantic_class < 0) {
    throw IoError(strcat_msg("video ", v.video_id, " does not fit the shard record format"));
  }
  write_le<uint32_t>(os, v.video_id);
  write_le<uint16_t>(os, static_cast<uint16_t>(v.height));
  write_le<uint16_t>(os, static_cast<uint16_t>(v.width));
  write_le<uint16_t>(os, static_cast<uint16_t>(v.num_frames()));
  write_le<uint8_t>(os, static_cast<uint8_t>(v.channels));
  write_le<uint16_t>(os, static_cast<uint16_t>(v.true_shot_boundaries.size()));
  for (int64_t b : v.true_shot_boundaries) write_le<uint16_t>(os, static_cast<uint16_t>(b));
  write_le<uint16_t>(os, static_cast<uint16_t>(v.semantic_class));
  std::vector<uint8_t> bytes(v.frames.size());
  for (size_t i = 0; i < v.frames.size(); ++i) {
    bytes[i] = static_cast<uint8_t>(std::lround(v.frames[i] * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

VideoRecord read_record(std::istream& is, const std::string& ctx) {
  VideoRecord v;
  v.video_id = read_le<uint32_t>(is, ctx);
  v.height = read_le<uint16_t>(is, ctx);
  v.width = read_le<uint16_t>(is, ctx);
  const int64_t t = read_le<uint16_t>(is, ctx);
  v.channels = read_le<uint8_t>(is, ctx);
  const int64_t nb = read_le<uint16_t>(is, ctx);
  for (int64_t i = 0; i < nb; ++i) {
    v.true_shot_boundaries.push_back(read_le<uint16_t>(is, ctx));
  }
  v.semantic_class = read_le<uint16_t>(is, ctx);
  const size_t n = static_cast<size_t>(t * v.height * v.width * v.channels);
  std::vector<uint8_t> bytes(n);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n))) {
    throw IoError(strcat_msg("truncated shard record: ", ctx));
  }
  v.frames.resize(n);
  for (size_t i = 0; i < n; ++i) v.frames[i] = static_cast<float>(bytes[i]) / 255.0f;
  return v;
}

struct IndexEntry {
  int64_t shard;
  int64_t offset;
};

std::map<uint32_t, IndexEntry> read_index(const std::string& dir) {
  std::ifstream ix(fs::path(dir) / "index.txt");
  if (!ix) throw IoError(strcat_msg("cannot open shard index in ", dir));
  std::map<uint32_t, IndexEntry> entries;
  std::string line;
  while (std::getline(ix, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    uint32_t vid;
    std::string shard;
    int64_t offset;
    if (!(ss >> vid >> shard >> offset)) {
      throw IoError(strcat_msg("corrupt index line in ", dir, ": ", line));
    }
    int64_t shard_idx = -1;
    if (std::sscanf(shard.c_str(), "shard-%05lld.vivs", (long long*)&shard_idx) != 1) {
      throw IoError(strcat_msg("corrupt shard name in index: ", shard));
    }
    entries[vid] = {shard_idx, offset};
  }
  return entries;
}

void check_header(std::istream& is, const std::string& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(strcat_msg("bad shard magic in ", path));
  }
  const uint32_t version = read_le<uint32_t>(is, path);
  if (version != kShardVersion) {
    throw IoError(strcat_msg("unsupported shard version ", version, " in ", path));
  }
}

}  // namespace

void write_shards(const Corpus& corpus, const std::string& dir, int64_t videos_per_shard) {
  if (corpus.empty()) throw Error("write_shards: empty corpus");
  if (videos_per_shard < 1) throw ConfigError("write_shards: videos_per_shard must be >= 1");
  fs::create_directories(dir);
  std::ofstream ix(fs::path(dir) / "index.txt", std::ios::trunc);
  if (!ix) throw IoError(strcat_msg("cannot write shard index in ", dir));
  const int64_t shards =
      (static_cast<int64_t>(corpus.size()) + videos_per_shard - 1) / videos_per_shard;
  int64_t vi = 0;
  for (int64_t s = 0; s < shards; ++s) {
    const std::string name = shard_name(s);
    std::ofstream os(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(strcat_msg("cannot open shard ", name, " for writing"));
    os.write(kMagic, 4);
    const int64_t count = std::min<int64_t>(videos_per_shard,
                                            static_cast<int64_t>(corpus.size()) - vi);
    write_le<uint32_t>(os, kShardVersion);
    write_le<uint32_t>(os, static_cast<uint32_t>(count));
    for (int64_t i = 0; i < count; ++i, ++vi) {
      const int64_t offset = os.tellp();
      ix << corpus[static_cast<size_t>(vi)].video_id << ' ' << name << ' ' << offset << '\n';
      write_record(os, corpus[static_cast<size_t>(vi)]);
    }
    if (!os) throw IoError(strcat_msg("write failure on shard ", name));
  }
}

Corpus read_shards(const std::string& dir) {
  Corpus corpus;
  std::vector<fs::path> shard_paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".vivs") shard_paths.push_back(e.path());
  }
  if (shard_paths.empty()) throw IoError(strcat_msg("no shards found in ", dir));
  std::sort(shard_paths.begin(), shard_paths.end());
  for (const auto& p : shard_paths) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError(strcat_msg("cannot open shard ", p.string()));
    check_header(is, p.string());
    const uint32_t count = read_le<uint32_t>(is, p.string());
    for (uint32_t i = 0; i < count; ++i) {
      corpus.push_back(read_record(is, strcat_msg(p.string(), " record ", i)));
    }
  }
  return corpus;
}

VideoRecord read_video(const std::string& dir, uint32_t video_id) {
  const auto index = read_index(dir);
  auto it = index.find(video_id);
  if (it == index.end()) {
    throw IoError(strcat_msg("video ", video_id, " not present in shard index of ", dir));
  }
  const fs::path path = fs::path(dir) / shard_name(it->second.shard);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(strcat_msg("cannot open shard ", path.string()));
  check_header(is, path.string());
  is.seekg(it->second.offset);
  VideoRecord v = read_record(is, strcat_msg(path.string(), " video ", video_id));
  if (v.video_id != video_id) {
    throw IoError(strcat_msg("index corruption: found video ", v.video_id, " at offset for ",
                             video_id));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Hierarchical sampling
// ---------------------------------------------------------------------------

void BatchSpec::validate() const {
  if (n_videos < 1 || k_shots < 1 || l_frames < 1) {
    throw ConfigError("batch spec: N, K, L must all be >= 1");
  }
  if (n_videos * k_shots != nk_product) {
    throw ConfigError(strcat_msg("batch spec: N*K = ", n_videos * k_shots,
                                 " must equal the configured product ", nk_product));
  }
}

namespace {

// Start offsets of K consecutive shots whose lengths are all >= L.
std::vector<int64_t> eligible_offsets(const VideoRecord& v, int64_t k, int64_t l) {
  std::vector<int64_t> out;
  const int64_t shots = v.shot_count();
  for (int64_t s = 0; s + k <= shots; ++s) {
    bool ok = true;
    for (int64_t j = 0; j < k; ++j) {
      const auto [b, e] = v.shot_range(s + j);
      if (e - b < l) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(s);
  }
  return out;
}

}  // namespace

std::vector<int64_t> eligible_videos(const Corpus& corpus, const BatchSpec& spec) {
  std::vector<int64_t> out;
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].shot_count() < spec.k_shots) continue;
    if (!eligible_offsets(corpus[i], spec.k_shots, spec.l_frames).empty()) {
      out.push_back(static_cast<int64_t>(i));
    }
  }
  return out;
}

HierBatch sample_hierarchical_batch(const Corpus& corpus, const BatchSpec& spec,
                                    std::mt19937_64& rng) {
  spec.validate();
  std::vector<int64_t> pool = eligible_videos(corpus, spec);
  if (static_cast<int64_t>(pool.size()) < spec.n_videos) {
    throw Error(strcat_msg("sample_hierarchical_batch: ", pool.size(), " eligible videos of ",
                           corpus.size(), ", need ", spec.n_videos));
  }
  // partial Fisher-Yates for N distinct uniform picks
  for (int64_t i = 0; i < spec.n_videos; ++i) {
    const int64_t j = i + uniform_int(rng, 0, static_cast<int64_t>(pool.size()) - 1 - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }

  const VideoRecord& first = corpus[static_cast<size_t>(pool[0])];
  HierBatch batch;
  batch.n = spec.n_videos;
  batch.k = spec.k_shots;
  batch.l = spec.l_frames;
  batch.h = first.height;
  batch.w = first.width;
  batch.c = first.channels;
  const int64_t frame_elems = batch.h * batch.w * batch.c;
  batch.frames.resize(static_cast<size_t>(batch.frame_count() * frame_elems));

  for (int64_t ni = 0; ni < spec.n_videos; ++ni) {
    const VideoRecord& v = corpus[static_cast<size_t>(pool[static_cast<size_t>(ni)])];
    if (v.height != batch.h || v.width != batch.w || v.channels != batch.c) {
      throw ShapeError(strcat_msg("sample_hierarchical_batch: video ", v.video_id,
                                  " has mismatched frame size"));
    }
    batch.video_ids.push_back(v.video_id);
    batch.video_class.push_back(v.semantic_class);
    const auto offsets = eligible_offsets(v, spec.k_shots, spec.l_frames);
    const int64_t start =
        offsets[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(offsets.size()) - 1))];
    for (int64_t ki = 0; ki < spec.k_shots; ++ki) {
      const auto [b, e] = v.shot_range(start + ki);
      const int64_t f0 = b + uniform_int(rng, 0, (e - b) - spec.l_frames);
      batch.shot_indices.push_back(start + ki);
      batch.exemplar_class.push_back(static_cast<int>(ni * spec.k_shots + ki));
      float* dst = batch.frames.data() +
                   ((ni * spec.k_shots + ki) * spec.l_frames) * frame_elems;
      std::memcpy(dst, v.frame(f0), static_cast<size_t>(spec.l_frames * frame_elems) *
                                        sizeof(float));
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  if (exemplar_m < 1) throw ConfigError("augment: exemplar_m must be >= 1");
  if (!(crop_min <= crop_max) || crop_min <= 0.0 || crop_max > 1.0) {
    throw ConfigError("augment: crop range must satisfy 0 < min <= max <= 1");
  }
  if (rotation_deg < 0 || brightness < 0 || contrast < 0 || hue < 0) {
    throw ConfigError("augment: jitter ranges must be >= 0");
  }
}

bool AugmentConfig::identity() const {
  return crop_min == 1.0 && crop_max == 1.0 && rotation_deg == 0.0 && brightness == 0.0 &&
         contrast == 0.0 && hue == 0.0 && !hsv_randomization;
}

namespace {

inline float bilinear(const float* img, int64_t h, int64_t w, int64_t c, double y, double x,
                      int64_t ch) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int64_t y0 = static_cast<int64_t>(y);
  const int64_t x0 = static_cast<int64_t>(x);
  const int64_t y1 = std::min(y0 + 1, h - 1);
  const int64_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double v00 = img[(y0 * w + x0) * c + ch];
  const double v01 = img[(y0 * w + x1) * c + ch];
  const double v10 = img[(y1 * w + x0) * c + ch];
  const double v11 = img[(y1 * w + x1) * c + ch];
  return static_cast<float>((v00 * (1 - fx) + v01 * fx) * (1 - fy) +
                            (v10 * (1 - fx) + v11 * fx) * fy);
}

}  // namespace

void augment(float* frames, int64_t count, int64_t h, int64_t w, int64_t c,
             const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.identity()) return;
  const int64_t frame_elems = h * w * c;
  std::vector<float> tmp(static_cast<size_t>(frame_elems));
  for (int64_t f = 0; f < count; ++f) {
    float* img = frames + f * frame_elems;

    if (cfg.crop_min < 1.0 || cfg.crop_max < 1.0) {
      const double s = uniform(rng, cfg.crop_min, cfg.crop_max);
      const double max_off_y = (1.0 - s) * static_cast<double>(h);
      const double max_off_x = (1.0 - s) * static_cast<double>(w);
      const double oy = uniform(rng, 0.0, max_off_y);
      const double ox = uniform(rng, 0.0, max_off_x);
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          const double sy = oy + (static_cast<double>(y) + 0.5) * s - 0.5;
          const double sx = ox + (static_cast<double>(x) + 0.5) * s - 0.5;
          for (int64_t ch = 0; ch < c; ++ch) {
            tmp[static_cast<size_t>((y * w + x) * c + ch)] = bilinear(img, h, w, c, sy, sx, ch);
          }
        }
      }
      std::memcpy(img, tmp.data(), static_cast<size_t>(frame_elems) * sizeof(float));
    }

    if (cfg.rotation_deg > 0.0) {
      const double theta = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg) * M_PI / 180.0;
      const double ct = std::cos(theta), st = std::sin(theta);
      const double cyc = (static_cast<double>(h) - 1) / 2.0;
      const double cxc = (static_cast<double>(w) - 1) / 2.0;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - cyc;
          const double dx = static_cast<double>(x) - cxc;
          const double sy = cyc + st * dx + ct * dy;
          const double sx = cxc + ct * dx - st * dy;
          for (int64_t ch = 0; ch < c; ++ch) {
            tmp[static_cast<size_t>((y * w + x) * c + ch)] = bilinear(img, h, w, c, sy, sx, ch);
          }
        }
      }
      std::memcpy(img, tmp.data(), static_cast<size_t>(frame_elems) * sizeof(float));
    }

    if (cfg.brightness > 0.0 || cfg.contrast > 0.0) {
      const double b = cfg.brightness > 0 ? uniform(rng, -cfg.brightness, cfg.brightness) : 0.0;
      const double k = cfg.contrast > 0 ? 1.0 + uniform(rng, -cfg.contrast, cfg.contrast) : 1.0;
      for (int64_t i = 0; i < frame_elems; ++i) {
        img[i] = static_cast<float>(
            std::clamp((static_cast<double>(img[i]) - 0.5) * k + 0.5 + b, 0.0, 1.0));
      }
    }

    const bool do_hue = cfg.hue > 0.0;
    if (do_hue || cfg.hsv_randomization) {
      const double dh = do_hue ? uniform(rng, -cfg.hue, cfg.hue) : 0.0;
      double hs = 0.0, sf = 1.0, vf = 1.0;
      if (cfg.hsv_randomization) {
        hs = uniform(rng, -0.1, 0.1);
        sf = uniform(rng, 0.7, 1.3);
        vf = uniform(rng, 0.7, 1.3);
      }
      if (c == 3) {
        for (int64_t p = 0; p < h * w; ++p) {
          double hsv[3];
          rgb_to_hsv(img[p * 3], img[p * 3 + 1], img[p * 3 + 2], hsv);
          double rgb[3];
          hsv_to_rgb(hsv[0] + dh + hs, std::clamp(hsv[1] * sf, 0.0, 1.0),
                     std::clamp(hsv[2] * vf, 0.0, 1.0), rgb);
          for (int ch = 0; ch < 3; ++ch) {
            img[p * 3 + ch] = static_cast<float>(std::clamp(rgb[ch], 0.0, 1.0));
          }
        }
      }
    }
  }
}

}  // namespace vivi::pipe
