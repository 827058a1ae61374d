#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "vivi/videogen.hpp"

using namespace vivi;
using videogen::GenConfig;

namespace {

GenConfig small_config() {
  GenConfig cfg;
  cfg.videos = 24;
  cfg.num_classes = 8;
  cfg.shots_per_video = 4;
  cfg.frames_per_shot = 12;
  cfg.frame_size = 32;
  return cfg;
}

}  // namespace

TEST_CASE("corpus generation is deterministic") {
  GenConfig cfg = small_config();
  auto a = videogen::generate_corpus(cfg, 7);
  auto b = videogen::generate_corpus(cfg, 7);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frames == b[i].frames);
    CHECK(a[i].true_shot_boundaries == b[i].true_shot_boundaries);
    CHECK(a[i].semantic_class == b[i].semantic_class);
  }
  auto c = videogen::generate_corpus(cfg, 8);
  CHECK(a[0].frames != c[0].frames);
}

TEST_CASE("classes are exactly balanced") {
  GenConfig cfg = small_config();
  cfg.videos = 64;
  auto corpus = videogen::generate_corpus(cfg, 3);
  std::map<int, int> hist;
  for (const auto& v : corpus) hist[v.semantic_class]++;
  CHECK(hist.size() == 8);
  for (const auto& [cls, n] : hist) {
    (void)cls;
    CHECK(n == 8);
  }
}

TEST_CASE("render is a pure function of (spec, indices)") {
  GenConfig cfg = small_config();
  auto spec = videogen::make_scene(cfg, 5, 100, 2);
  auto f1 = videogen::render_frame(spec, 1, 3, 32);
  auto f2 = videogen::render_frame(spec, 1, 3, 32);
  CHECK(f1 == f2);
  auto f3 = videogen::render_frame(spec, 1, 4, 32);
  CHECK(f1 != f3);
}

TEST_CASE("pose advances by the configured per-frame increment") {
  GenConfig cfg = small_config();
  auto spec = videogen::make_scene(cfg, 5, 101, 1);
  auto m0 = videogen::frame_meta(spec, 0, 0);
  auto m1 = videogen::frame_meta(spec, 0, 1);
  auto m2 = videogen::frame_meta(spec, 0, 2);
  const float d01 = m1.angle - m0.angle;
  const float d12 = m2.angle - m1.angle;
  CHECK(d01 == doctest::Approx(d12).epsilon(1e-5));
  CHECK(std::abs(m1.cx - m0.cx) <= cfg.pos_drift + 1e-9);
}

TEST_CASE("zero lighting gain leaves only the background floor") {
  GenConfig cfg = small_config();
  auto spec = videogen::make_scene(cfg, 5, 102, 3);
  spec.shots[0].light0 = 0.0;
  spec.shots[0].dlight = 0.0;
  auto frame = videogen::render_frame(spec, 0, 0, 32);
  for (float v : frame) CHECK(v == doctest::Approx(0.03).epsilon(1e-6));
}

TEST_CASE("within-shot frame deltas are smaller than cross-boundary deltas") {
  GenConfig cfg = small_config();
  cfg.videos = 40;
  auto corpus = videogen::generate_corpus(cfg, 11);
  int64_t boundaries = 0, ordered = 0;
  for (const auto& v : corpus) {
    const int64_t fe = v.height * v.width * v.channels;
    auto delta = [&](int64_t t) {
      double d = 0;
      for (int64_t i = 0; i < fe; ++i)
        d += std::abs(v.frames[static_cast<size_t>(t * fe + i)] -
                      v.frames[static_cast<size_t>((t - 1) * fe + i)]);
      return d / static_cast<double>(fe);
    };
    // mean within-shot delta
    double within = 0;
    int64_t nw = 0;
    for (int64_t t = 1; t < v.num_frames(); ++t) {
      bool is_boundary = false;
      for (int64_t b : v.true_shot_boundaries) is_boundary |= (b == t);
      if (!is_boundary) {
        within += delta(t);
        ++nw;
      }
    }
    within /= static_cast<double>(nw);
    for (int64_t b : v.true_shot_boundaries) {
      ++boundaries;
      if (delta(b) > within) ++ordered;
    }
  }
  CHECK(boundaries > 50);
  CHECK(static_cast<double>(ordered) >= 0.99 * static_cast<double>(boundaries));
}

TEST_CASE("held-out id bases do not collide") {
  GenConfig a = small_config();
  GenConfig b = small_config();
  b.id_base = 1 << 20;
  auto ca = videogen::generate_corpus(a, 1);
  auto cb = videogen::generate_corpus(b, 1);
  for (const auto& va : ca) {
    for (const auto& vb : cb) CHECK(va.video_id != vb.video_id);
  }
}

TEST_CASE("config validation rejects unusable sizes") {
  GenConfig cfg = small_config();
  cfg.frame_size = 8;
  CHECK_THROWS_AS(videogen::generate_corpus(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.num_classes = 1;
  CHECK_THROWS_AS(videogen::generate_corpus(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.frames_per_shot = 4;
  CHECK_THROWS_AS(videogen::generate_corpus(cfg, 1), ConfigError);
}
