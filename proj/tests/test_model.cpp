#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vivi/model.hpp"
#include "vivi/rng.hpp"

using namespace vivi;
using ad::Array;
using ad::Graph;
using ad::Var;
using model::Head;
using model::ModelBundle;
using model::ModelConfig;
using model::PredictorConfig;
using model::PredictorKind;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_h = 16;
  cfg.input_w = 16;
  cfg.input_c = 3;
  cfg.channels = {4, 8};
  cfg.exemplar_outputs = 6;
  cfg.video_projection_dim = 5;
  cfg.classifier_outputs = 3;
  cfg.groupnorm_groups = 2;
  return cfg;
}

Array<float> random_frames(int64_t b, int64_t h, int64_t w, uint64_t seed) {
  std::mt19937_64 rng(seed);
  Array<float> a({b, h, w, 3});
  for (auto& v : a.data) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return a;
}

}  // namespace

TEST_CASE("encoding is deterministic and batch-consistent in inference mode") {
  auto m = model::build_model<float>(tiny_config(), std::nullopt, 42);
  Array<float> frames = random_frames(3, 16, 16, 7);
  auto e1 = model::encode_frames(m, frames);
  auto e2 = model::encode_frames(m, frames);
  CHECK(e1.data == e2.data);
  CHECK(e1.shape == Shape{3, 8});

  // rows equal per-frame calls
  for (int64_t i = 0; i < 3; ++i) {
    Array<float> one({1, 16, 16, 3});
    std::copy(frames.data.begin() + i * 16 * 16 * 3,
              frames.data.begin() + (i + 1) * 16 * 16 * 3, one.data.begin());
    auto ei = model::encode_frames(m, one);
    for (int64_t d = 0; d < 8; ++d) {
      CHECK(ei.data[static_cast<size_t>(d)] ==
            doctest::Approx(e1.data[static_cast<size_t>(i * 8 + d)]).epsilon(1e-6));
    }
  }
}

TEST_CASE("wrong input shape errors") {
  auto m = model::build_model<float>(tiny_config(), std::nullopt, 42);
  Array<float> bad = random_frames(2, 8, 8, 3);
  CHECK_THROWS_AS(model::encode_frames(m, bad), ShapeError);
}

TEST_CASE("zeroed final block and affine gives a zero embedding") {
  auto m = model::build_model<float>(tiny_config(), std::nullopt, 42);
  auto& last = m.blocks.back();
  std::fill(last.kernel.value.data.begin(), last.kernel.value.data.end(), 0.f);
  std::fill(last.beta.value.data.begin(), last.beta.value.data.end(), 0.f);
  Array<float> frames = random_frames(2, 16, 16, 9);
  auto e = model::encode_frames(m, frames);
  for (float v : e.data) CHECK(v == doctest::Approx(0.f));
}

TEST_CASE("head contracts: exemplar unit norm, rotation width, zero classifier") {
  auto m = model::build_model<float>(tiny_config(), std::nullopt, 43);
  Array<float> frames = random_frames(4, 16, 16, 11);
  Graph<float> g;
  Var<float> pre = model::encoder_forward(m, g, g.input(frames), false);

  Var<float> ex = model::apply_head(m, g, pre, Head::exemplar);
  const auto& ev = g.data(ex);
  for (int64_t r = 0; r < 4; ++r) {
    double norm = 0;
    for (int64_t c = 0; c < 6; ++c) {
      const double v = ev[static_cast<size_t>(r * 6 + c)];
      norm += v * v;
    }
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
  }

  Var<float> rot = model::apply_head(m, g, pre, Head::rotation);
  CHECK(g.shape(rot) == Shape{4, 4});

  std::fill(m.classifier_head->w.value.data.begin(), m.classifier_head->w.value.data.end(),
            0.f);
  std::fill(m.classifier_head->b.value.data.begin(), m.classifier_head->b.value.data.end(),
            0.f);
  Var<float> cls = model::apply_head(m, g, pre, Head::classifier);
  for (float v : g.data(cls)) CHECK(v == 0.f);
}

TEST_CASE("classifier head absent errors") {
  ModelConfig cfg = tiny_config();
  cfg.classifier_outputs = 0;
  auto m = model::build_model<float>(cfg, std::nullopt, 1);
  Graph<float> g;
  Var<float> pre = g.input(Array<float>({2, 8}));
  CHECK_THROWS_AS(model::apply_head(m, g, pre, Head::classifier), Error);
}

TEST_CASE("pool_shot: identity for L=1, mean otherwise, scale equivariance") {
  Array<float> one({1, 3}, {1.f, 2.f, 3.f});
  auto p1 = model::pool_shot(one);
  CHECK(p1.data == std::vector<float>{1.f, 2.f, 3.f});

  Array<float> two({2, 2}, {1.f, 0.f, 0.f, 1.f});
  auto p2 = model::pool_shot(two);
  CHECK(p2.data == std::vector<float>{0.5f, 0.5f});

  Array<float> scaled = two;
  for (auto& v : scaled.data) v *= 4.f;
  auto p4 = model::pool_shot(scaled);
  for (size_t i = 0; i < p4.data.size(); ++i) {
    CHECK(p4.data[i] == doctest::Approx(4.f * p2.data[i]));
  }

  Array<float> empty({0, 3});
  CHECK_THROWS_AS(model::pool_shot(empty), ShapeError);
}

TEST_CASE("pair scorer evaluates the bilinear toy case") {
  ModelConfig cfg = tiny_config();
  cfg.video_projection_dim = 1;
  PredictorConfig pc;
  pc.kind = PredictorKind::pair_mlp;
  pc.mlp_hidden = 1;
  pc.mlp_output = 1;
  pc.k_shots = 2;
  auto m = model::build_model<float>(cfg, pc, 3);
  // phi1(x) = 2x and phi2(x) = 3x on positive inputs (relu transparent)
  m.phi1_hidden->w.value.data = {1.f};
  m.phi1_hidden->b.value.data = {0.f};
  m.phi1_out->w.value.data = {2.f};
  m.phi1_out->b.value.data = {0.f};
  m.phi2_hidden->w.value.data = {1.f};
  m.phi2_hidden->b.value.data = {0.f};
  m.phi2_out->w.value.data = {3.f};
  m.phi2_out->b.value.data = {0.f};
  Array<float> e({1}, {1.f});
  Array<float> ep({1}, {2.f});
  CHECK(model::score_pair(m, e, ep) == doctest::Approx(12.f));
  // asymmetric by construction
  CHECK(model::score_pair(m, e, ep) != model::score_pair(m, ep, e));
}

TEST_CASE("zeroed phi2 gives zero scores for all pairs") {
  ModelConfig cfg = tiny_config();
  PredictorConfig pc;
  pc.kind = PredictorKind::pair_mlp;
  pc.mlp_hidden = 4;
  pc.mlp_output = 3;
  pc.k_shots = 2;
  auto m = model::build_model<float>(cfg, pc, 5);
  std::fill(m.phi2_out->w.value.data.begin(), m.phi2_out->w.value.data.end(), 0.f);
  std::fill(m.phi2_out->b.value.data.begin(), m.phi2_out->b.value.data.end(), 0.f);
  std::mt19937_64 rng(8);
  Graph<float> g;
  Array<float> e({3, 5});
  Array<float> ep({3, 5});
  for (auto& v : e.data) v = static_cast<float>(uniform(rng, -1, 1));
  for (auto& v : ep.data) v = static_cast<float>(uniform(rng, -1, 1));
  Var<float> s = model::pair_score_matrix(m, g, g.input(e), g.input(ep));
  for (float v : g.data(s)) CHECK(v == 0.f);
}

TEST_CASE("recurrent predictor: count, causality, zero weights") {
  ModelConfig cfg = tiny_config();
  PredictorConfig pc;
  pc.kind = PredictorKind::recurrent;
  pc.recurrent_hidden = 6;
  pc.recurrent_layers = 2;
  pc.k_shots = 4;
  auto m = model::build_model<float>(cfg, pc, 6);
  std::mt19937_64 rng(13);
  Array<float> emb({8, 5});  // 2 videos x 4 shots, D'=5
  for (auto& v : emb.data) v = static_cast<float>(uniform(rng, -1, 1));

  Graph<float> g;
  auto preds = model::predict_sequence(m, g, g.input(emb), 2, 4);
  REQUIRE(preds.size() == 3);
  std::vector<std::vector<float>> base;
  for (auto p : preds) base.push_back(g.data(p));

  // perturb shot 3 (index 2) of video 0: predictions for steps 2 and 3 stay
  Array<float> emb2 = emb;
  for (int64_t d = 0; d < 5; ++d) emb2.data[static_cast<size_t>(2 * 5 + d)] += 0.25f;
  Graph<float> g2;
  auto preds2 = model::predict_sequence(m, g2, g2.input(emb2), 2, 4);
  CHECK(g2.data(preds2[0]) == base[0]);
  CHECK(g2.data(preds2[1]) == base[1]);
  CHECK(g2.data(preds2[2]) != base[2]);

  // K=2 gives exactly one prediction
  ModelConfig cfg2 = tiny_config();
  PredictorConfig pc2 = pc;
  pc2.k_shots = 2;
  auto m2 = model::build_model<float>(cfg2, pc2, 7);
  Graph<float> g3;
  Array<float> emb3({4, 5});
  for (auto& v : emb3.data) v = 0.3f;
  CHECK(model::predict_sequence(m2, g3, g3.input(emb3), 2, 2).size() == 1);

  // zero recurrent weights and zero output map give zero predictions
  for (auto& l : m.lstm) {
    std::fill(l.w.value.data.begin(), l.w.value.data.end(), 0.f);
    std::fill(l.b.value.data.begin(), l.b.value.data.end(), 0.f);
  }
  std::fill(m.lstm_out->w.value.data.begin(), m.lstm_out->w.value.data.end(), 0.f);
  std::fill(m.lstm_out->b.value.data.begin(), m.lstm_out->b.value.data.end(), 0.f);
  Graph<float> g4;
  auto zp = model::predict_sequence(m, g4, g4.input(emb), 2, 4);
  for (auto p : zp) {
    for (float v : g4.data(p)) CHECK(v == 0.f);
  }
}

TEST_CASE("order predictor: width arithmetic, sensitivity, zero weights") {
  ModelConfig cfg = tiny_config();
  cfg.video_projection_dim = 64;
  PredictorConfig pc;
  pc.kind = PredictorKind::order_mlp;
  pc.order_hidden = 7;
  pc.k_shots = 2;
  auto m = model::build_model<float>(cfg, pc, 8);
  CHECK(m.order_hidden->w.value.shape == Shape{128, 7});  // K*D' concatenation width

  std::mt19937_64 rng(17);
  Array<float> emb({4, 64});
  for (auto& v : emb.data) v = static_cast<float>(uniform(rng, -1, 1));
  Graph<float> g;
  Var<float> logit = model::order_logit(m, g, g.input(emb), 2, 2);
  CHECK(g.shape(logit) == Shape{2});

  // reversed order generally changes the logit
  Array<float> rev({4, 64});
  for (int64_t v = 0; v < 2; ++v) {
    for (int64_t k = 0; k < 2; ++k) {
      std::copy(emb.data.begin() + (v * 2 + (1 - k)) * 64,
                emb.data.begin() + (v * 2 + (2 - k)) * 64,
                rev.data.begin() + (v * 2 + k) * 64);
    }
  }
  Graph<float> g2;
  Var<float> logit_rev = model::order_logit(m, g2, g2.input(rev), 2, 2);
  CHECK(g.data(logit) != g2.data(logit_rev));

  // zero weights leave only the bias
  std::fill(m.order_hidden->w.value.data.begin(), m.order_hidden->w.value.data.end(), 0.f);
  std::fill(m.order_hidden->b.value.data.begin(), m.order_hidden->b.value.data.end(), 0.f);
  std::fill(m.order_out->w.value.data.begin(), m.order_out->w.value.data.end(), 0.f);
  m.order_out->b.value.data = {0.37f};
  Graph<float> g3;
  Var<float> l3 = model::order_logit(m, g3, g3.input(emb), 2, 2);
  for (float v : g3.data(l3)) CHECK(v == doctest::Approx(0.37f));

  // K mismatch errors
  Graph<float> g4;
  Array<float> emb3({6, 64});
  CHECK_THROWS_AS(model::order_logit(m, g4, g4.input(emb3), 2, 3), ShapeError);
}

TEST_CASE("group-norm with weight standardization constrains kernels at use") {
  ModelConfig cfg = tiny_config();
  cfg.norm = model::NormKind::group_norm_ws;
  auto m = model::build_model<float>(cfg, std::nullopt, 44);
  auto kernels = model::standardized_kernels(m);
  REQUIRE(kernels.size() == 2);
  for (const auto& k : kernels) {
    const int64_t out_ch = k.shape[0];
    const int64_t rest = k.numel() / out_ch;
    for (int64_t o = 0; o < out_ch; ++o) {
      double mean = 0, var = 0;
      for (int64_t i = 0; i < rest; ++i) mean += k.data[static_cast<size_t>(o * rest + i)];
      mean /= static_cast<double>(rest);
      for (int64_t i = 0; i < rest; ++i) {
        const double d = k.data[static_cast<size_t>(o * rest + i)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(rest);
      CHECK(std::abs(mean) <= 1e-5);
      CHECK(var == doctest::Approx(1.0).epsilon(0.01));
    }
  }
}
