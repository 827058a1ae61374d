#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "vivi/pipeline.hpp"
#include "vivi/rng.hpp"

using namespace vivi;
using pipe::AugmentConfig;
using pipe::BatchSpec;
using videogen::GenConfig;
using videogen::VideoRecord;

namespace {

GenConfig small_config() {
  GenConfig cfg;
  cfg.videos = 30;
  cfg.num_classes = 6;
  cfg.shots_per_video = 4;
  cfg.frames_per_shot = 12;
  cfg.frame_size = 32;
  return cfg;
}

VideoRecord solid_video(const std::vector<std::array<float, 3>>& colors,
                        int64_t frames_per_color) {
  VideoRecord v;
  v.video_id = 1;
  v.height = 8;
  v.width = 8;
  v.channels = 3;
  for (const auto& col : colors) {
    for (int64_t f = 0; f < frames_per_color; ++f) {
      for (int64_t p = 0; p < 64; ++p) {
        v.frames.push_back(col[0]);
        v.frames.push_back(col[1]);
        v.frames.push_back(col[2]);
      }
    }
  }
  return v;
}

std::string temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() / (std::string("vivi_test_") + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("histogram of mid-gray puts one bin per channel at one third") {
  std::vector<float> frame(8 * 8 * 3, 0.5f);
  auto hist = pipe::frame_histogram(frame.data(), 8, 8, 3);
  REQUIRE(hist.size() == 48);
  int nonzero = 0;
  for (double v : hist) {
    if (v > 0) {
      ++nonzero;
      CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
  }
  CHECK(nonzero == 3);
}

TEST_CASE("histograms sum to one") {
  std::mt19937_64 rng(3);
  std::vector<float> frame(32 * 32 * 3);
  for (auto& v : frame) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  auto hist = pipe::frame_histogram(frame.data(), 32, 32, 3);
  double total = 0;
  for (double v : hist) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("one-bin channel shift gives L1 distance 2/3") {
  std::vector<float> a(8 * 8 * 3), b(8 * 8 * 3);
  for (int64_t p = 0; p < 64; ++p) {
    // channel 0 moves exactly one full bin (1/16); others stay
    a[p * 3 + 0] = 0.40f; b[p * 3 + 0] = 0.40f + 1.0f / 16.0f;
    a[p * 3 + 1] = 0.20f; b[p * 3 + 1] = 0.20f;
    a[p * 3 + 2] = 0.70f; b[p * 3 + 2] = 0.70f;
  }
  auto ha = pipe::frame_histogram(a.data(), 8, 8, 3);
  auto hb = pipe::frame_histogram(b.data(), 8, 8, 3);
  CHECK(pipe::histogram_l1_distance(ha, hb) == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("constant video has no boundaries") {
  auto v = solid_video({{0.3f, 0.5f, 0.7f}}, 12);
  CHECK(pipe::detect_shot_boundaries(v, 0.3).empty());
}

TEST_CASE("alternating colors give boundaries at multiples of five") {
  auto v = solid_video({{0.9f, 0.1f, 0.1f}, {0.1f, 0.1f, 0.9f},
                        {0.9f, 0.1f, 0.1f}, {0.1f, 0.1f, 0.9f}}, 5);
  auto b = pipe::detect_shot_boundaries(v, 0.3);
  CHECK(b == std::vector<int64_t>{5, 10, 15});
}

TEST_CASE("detector is invariant to sub-bin luminance offsets") {
  auto v1 = solid_video({{0.40f, 0.40f, 0.40f}, {0.90f, 0.20f, 0.20f}}, 6);
  auto v2 = solid_video({{0.41f, 0.41f, 0.41f}, {0.91f, 0.21f, 0.21f}}, 6);
  // 0.40 and 0.41 land in the same 1/16 bin; 0.90/0.91 likewise
  CHECK(pipe::detect_shot_boundaries(v1, 0.3) == pipe::detect_shot_boundaries(v2, 0.3));
}

TEST_CASE("boundary f1 on a seeded corpus exceeds 0.95") {
  GenConfig cfg = small_config();
  cfg.videos = 60;
  auto corpus = videogen::generate_corpus(cfg, 21);
  pipe::BoundaryScore total;
  for (const auto& v : corpus) {
    auto detected = pipe::detect_shot_boundaries(v, 0.3);
    auto s = pipe::score_boundaries(detected, v.true_shot_boundaries);
    total.true_positives += s.true_positives;
    total.false_positives += s.false_positives;
    total.false_negatives += s.false_negatives;
  }
  INFO("P=", total.precision(), " R=", total.recall());
  CHECK(total.f1() >= 0.95);
}

TEST_CASE("shard round trip is byte-exact and randomly accessible") {
  GenConfig cfg = small_config();
  auto corpus = videogen::generate_corpus(cfg, 9);
  const std::string dir = temp_dir("shards");
  pipe::write_shards(corpus, dir, 7);
  auto loaded = pipe::read_shards(dir);
  REQUIRE(loaded.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].video_id == corpus[i].video_id);
    CHECK(loaded[i].frames == corpus[i].frames);
    CHECK(loaded[i].true_shot_boundaries == corpus[i].true_shot_boundaries);
    CHECK(loaded[i].semantic_class == corpus[i].semantic_class);
  }
  auto v5 = pipe::read_video(dir, corpus[5].video_id);
  CHECK(v5.frames == corpus[5].frames);
}

TEST_CASE("truncated shard read errors instead of returning partial data") {
  GenConfig cfg = small_config();
  cfg.videos = 4;
  auto corpus = videogen::generate_corpus(cfg, 9);
  const std::string dir = temp_dir("trunc");
  pipe::write_shards(corpus, dir, 4);
  const auto shard = std::filesystem::path(dir) / "shard-00000.vivs";
  const auto size = std::filesystem::file_size(shard);
  std::filesystem::resize_file(shard, size - 100);
  CHECK_THROWS_AS(pipe::read_shards(dir), IoError);
}

TEST_CASE("batch spec enforces the NK product") {
  BatchSpec spec;
  spec.n_videos = 8;
  spec.k_shots = 4;
  spec.nk_product = 31;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("hierarchical sampling: shapes, classes and the drop rule") {
  GenConfig cfg = small_config();
  cfg.videos = 40;
  auto corpus = videogen::generate_corpus(cfg, 31);
  // one video with too few shots
  corpus[7].true_shot_boundaries.clear();
  corpus[7].frames.resize(static_cast<size_t>(2 * 32 * 32 * 3));

  BatchSpec spec;
  spec.n_videos = 8;
  spec.k_shots = 4;  // a 2-shot... the stripped video has 1 shot < 4
  spec.l_frames = 8;
  spec.nk_product = 32;

  std::mt19937_64 rng(5);
  auto batch = pipe::sample_hierarchical_batch(corpus, spec, rng);
  CHECK(batch.frames.size() ==
        static_cast<size_t>(8 * 4 * 8 * 32 * 32 * 3));
  // 32 distinct exemplar classes
  std::map<int, int> classes;
  for (int c : batch.exemplar_class) classes[c]++;
  CHECK(classes.size() == 32);

  // drop rule: stripped video never sampled over many draws
  for (int it = 0; it < 2000; ++it) {
    auto b = pipe::sample_hierarchical_batch(corpus, spec, rng);
    for (uint32_t vid : b.video_ids) CHECK(vid != corpus[7].video_id);
  }
}

TEST_CASE("sampled frames are consecutive in source indexing") {
  GenConfig cfg = small_config();
  auto corpus = videogen::generate_corpus(cfg, 33);
  BatchSpec spec;
  spec.n_videos = 2;
  spec.k_shots = 2;
  spec.l_frames = 8;
  spec.nk_product = 4;
  std::mt19937_64 rng(6);
  auto batch = pipe::sample_hierarchical_batch(corpus, spec, rng);
  // locate each sampled frame run inside its source video
  const int64_t fe = 32 * 32 * 3;
  for (int64_t ni = 0; ni < 2; ++ni) {
    const VideoRecord* src = nullptr;
    for (const auto& v : corpus)
      if (v.video_id == batch.video_ids[static_cast<size_t>(ni)]) src = &v;
    REQUIRE(src != nullptr);
    for (int64_t ki = 0; ki < 2; ++ki) {
      const float* first = batch.frames.data() + ((ni * 2 + ki) * 8) * fe;
      int64_t found = -1;
      for (int64_t t = 0; t + 8 <= src->num_frames(); ++t) {
        if (std::memcmp(src->frame(t), first, sizeof(float) * static_cast<size_t>(8 * fe)) ==
            0) {
          found = t;
          break;
        }
      }
      CHECK(found >= 0);
    }
  }
}

TEST_CASE("eligible videos are drawn approximately uniformly") {
  GenConfig cfg = small_config();
  cfg.videos = 100;
  auto corpus = videogen::generate_corpus(cfg, 35);
  BatchSpec spec;
  spec.n_videos = 8;
  spec.k_shots = 2;
  spec.l_frames = 8;
  spec.nk_product = 16;
  auto eligible = pipe::eligible_videos(corpus, spec);
  std::mt19937_64 rng(77);
  std::map<uint32_t, int64_t> counts;
  const int64_t draws = 10000;
  for (int64_t i = 0; i < draws; ++i) {
    auto b = pipe::sample_hierarchical_batch(corpus, spec, rng);
    for (uint32_t vid : b.video_ids) counts[vid]++;
  }
  const double expect = static_cast<double>(draws * spec.n_videos) /
                        static_cast<double>(eligible.size());
  double chi2 = 0;
  for (int64_t idx : eligible) {
    const double delta = static_cast<double>(counts[corpus[static_cast<size_t>(idx)].video_id]) - expect;
    chi2 += delta * delta / expect;
  }
  // dof = eligible - 1 (~99); p > 0.01 means chi2 below roughly dof + 3.3*sqrt(2*dof)
  const double dof = static_cast<double>(eligible.size() - 1);
  CHECK(chi2 < dof + 3.3 * std::sqrt(2 * dof));
}

TEST_CASE("insufficient eligible videos is a structured error") {
  GenConfig cfg = small_config();
  cfg.videos = 4;
  auto corpus = videogen::generate_corpus(cfg, 37);
  BatchSpec spec;
  spec.n_videos = 8;
  spec.k_shots = 2;
  spec.l_frames = 8;
  spec.nk_product = 16;
  std::mt19937_64 rng(5);
  CHECK_THROWS_WITH_AS(pipe::sample_hierarchical_batch(corpus, spec, rng),
                       doctest::Contains("eligible"), Error);
}

TEST_CASE("identity augmentation is bit-exact") {
  GenConfig cfg = small_config();
  cfg.videos = 2;
  auto corpus = videogen::generate_corpus(cfg, 39);
  std::vector<float> frames = corpus[0].frames;
  auto orig = frames;
  AugmentConfig ac;
  ac.crop_min = ac.crop_max = 1.0;
  ac.rotation_deg = 0;
  ac.brightness = 0;
  ac.contrast = 0;
  ac.hue = 0;
  std::mt19937_64 rng(4);
  pipe::augment(frames.data(), corpus[0].num_frames(), 32, 32, 3, ac, rng);
  CHECK(frames == orig);
}

TEST_CASE("augmentation stays in range and is reproducible") {
  GenConfig cfg = small_config();
  cfg.videos = 2;
  auto corpus = videogen::generate_corpus(cfg, 41);
  AugmentConfig ac;  // defaults: crop/rotate/color enabled
  ac.hsv_randomization = true;
  auto a = corpus[0].frames;
  auto b = corpus[0].frames;
  std::mt19937_64 r1(9), r2(9);
  pipe::augment(a.data(), corpus[0].num_frames(), 32, 32, 3, ac, r1);
  pipe::augment(b.data(), corpus[0].num_frames(), 32, 32, 3, ac, r2);
  CHECK(a == b);
  CHECK(a != corpus[0].frames);
  for (float v : a) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}
