#include "vivi/gradcheck.hpp"

#include <cmath>
#include <memory>
#include <random>

#include "vivi/losses.hpp"
#include "vivi/model.hpp"
#include "vivi/rng.hpp"

namespace vivi::ad {

GradCheckResult grad_check(const std::string& name,
                           const std::function<Var<double>(Graph<double>&)>& build,
                           const std::vector<Parameter<double>*>& params, double tolerance,
                           double fd_step) {
  GradCheckResult res;
  res.name = name;

  auto forward_value = [&build]() {
    Graph<double> g;
    Var<double> out = build(g);
    if (g.data(out).size() != 1) {
      throw ShapeError(strcat_msg("grad_check: output of ", out.id, " is not scalar"));
    }
    return g.data(out)[0];
  };

  // analytic gradients
  for (auto* p : params) p->zero_grad();
  double f0 = 0.0;
  {
    Graph<double> g;
    Var<double> out = build(g);
    f0 = g.data(out)[0];
    g.backward(out);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  // Central differences cannot resolve derivatives below the rounding noise
  // of the two function evaluations; differences under this floor are not
  // evidence of a wrong backward rule (they show up for directions the loss
  // is exactly invariant to, e.g. per-row score shifts in InfoNCE).
  const double fd_noise = 1e-9 * std::max(1.0, std::abs(f0));

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    for (size_t j = 0; j < p->value.data.size(); ++j) {
      const double saved = p->value.data[j];
      p->value.data[j] = saved + fd_step;
      const double fp = forward_value();
      p->value.data[j] = saved - fd_step;
      const double fm = forward_value();
      p->value.data[j] = saved;
      const double numeric = (fp - fm) / (2.0 * fd_step);
      const double a = analytic[pi][j];
      res.elements += 1;
      if (std::abs(a) < 1e-12 && std::abs(numeric) < 1e-12) continue;
      if (std::abs(a - numeric) <= fd_noise) continue;
      const double rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
      if (rel > res.max_rel_err) res.max_rel_err = rel;
    }
  }
  res.pass = res.max_rel_err <= tolerance;
  return res;
}

namespace {

struct Rng {
  std::mt19937_64 engine;
  explicit Rng(uint64_t seed) : engine(seed) {}
  double uniform(double lo = -1.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine);
  }
};

Parameter<double> rand_param(Rng& rng, const std::string& name, Shape shape) {
  Array<double> a(std::move(shape));
  for (auto& v : a.data) v = rng.uniform();
  return Parameter<double>(name, std::move(a));
}

// Uniform in [-1,1] but bounded away from zero, for kinked ops (relu) and
// mining comparisons where the finite-difference step must not cross the
// non-smooth point.
Parameter<double> rand_param_away(Rng& rng, const std::string& name, Shape shape,
                                  double radius) {
  Parameter<double> p = rand_param(rng, name, std::move(shape));
  for (auto& v : p.value.data) {
    if (std::abs(v) < radius) v = v < 0 ? v - radius : v + radius;
  }
  return p;
}

void randomize_model(model::ModelBundle<double>& m, Rng& rng, double scale = 0.5) {
  for (auto* p : m.parameters()) {
    for (auto& v : p->value.data) v = rng.uniform(-scale, scale);
  }
}

}  // namespace

std::vector<GradCheckResult> standard_grad_checks(double tolerance, uint64_t seed) {
  std::vector<GradCheckResult> out;
  Rng rng(derive_seed(seed, 0xC0FFEE));

  // --- primitives ---
  {
    auto x = rand_param(rng, "x", {3, 4});
    auto w = rand_param(rng, "w", {4, 5});
    auto b = rand_param(rng, "b", {5});
    out.push_back(grad_check(
        "linear",
        [&](Graph<double>& g) {
          return mean_all(linear(g.param(x), g.param(w), std::optional<Var<double>>(g.param(b))));
        },
        {&x, &w, &b}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {2, 5, 5, 2});
    auto k = rand_param(rng, "k", {3, 3, 3, 2});
    auto b = rand_param(rng, "b", {3});
    out.push_back(grad_check(
        "conv2d_same_stride2",
        [&](Graph<double>& g) {
          return mean_all(conv2d(g.param(x), g.param(k),
                                 std::optional<Var<double>>(g.param(b)), 2, Padding::same));
        },
        {&x, &k, &b}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {1, 4, 4, 2});
    auto k = rand_param(rng, "k", {2, 3, 3, 2});
    out.push_back(grad_check(
        "conv2d_valid_stride1",
        [&](Graph<double>& g) {
          return mean_all(
              conv2d(g.param(x), g.param(k), std::optional<Var<double>>{}, 1, Padding::valid));
        },
        {&x, &k}, tolerance));
  }
  {
    auto x = rand_param_away(rng, "x", {24}, 0.05);
    out.push_back(grad_check(
        "relu", [&](Graph<double>& g) { return mean_all(relu(g.param(x))); }, {&x},
        tolerance));
  }
  {
    auto x = rand_param(rng, "x", {12});
    out.push_back(grad_check(
        "sigmoid", [&](Graph<double>& g) { return mean_all(sigmoid(g.param(x))); }, {&x},
        tolerance));
    out.push_back(grad_check(
        "tanh", [&](Graph<double>& g) { return mean_all(tanh_act(g.param(x))); }, {&x},
        tolerance));
  }
  {
    auto a = rand_param(rng, "a", {8});
    auto b = rand_param(rng, "b", {8});
    out.push_back(grad_check(
        "add_sub_mul_scale",
        [&](Graph<double>& g) {
          Var<double> va = g.param(a), vb = g.param(b);
          Var<double> t = add(mul(va, vb), sub(va, vb));
          return mean_all(add_scalar(scale(t, 0.7), 0.3));
        },
        {&a, &b}, tolerance));
  }
  {
    auto a = rand_param(rng, "a", {3, 4});
    auto b = rand_param(rng, "b", {3, 2});
    out.push_back(grad_check(
        "concat_slice_take_gather",
        [&](Graph<double>& g) {
          Var<double> c = concat_cols<double>({g.param(a), g.param(b)});
          Var<double> s = slice_cols(c, 1, 5);
          Var<double> t = take_rows(s, 0, 2);
          return mean_all(gather(t, {0, 3, 5, 5, 7}));
        },
        {&a, &b}, tolerance));
  }
  {
    auto a = rand_param(rng, "a", {3, 4});
    auto b = rand_param(rng, "b", {5, 4});
    out.push_back(grad_check(
        "matmul_nt",
        [&](Graph<double>& g) { return mean_all(matmul_nt(g.param(a), g.param(b))); },
        {&a, &b}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {2, 3, 3, 4});
    out.push_back(grad_check(
        "global_avg_pool",
        [&](Graph<double>& g) { return mean_all(global_avg_pool(g.param(x))); }, {&x},
        tolerance));
  }
  {
    auto x = rand_param(rng, "x", {6, 4});
    out.push_back(grad_check(
        "pool_rows", [&](Graph<double>& g) { return mean_all(pool_rows(g.param(x), 3)); },
        {&x}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {6, 3});
    auto gamma = rand_param_away(rng, "gamma", {3}, 0.2);
    auto beta = rand_param(rng, "beta", {3});
    auto st = std::make_shared<BatchNormState<double>>(3);
    out.push_back(grad_check(
        "batch_norm_train",
        [&, st](Graph<double>& g) {
          return mean_all(sigmoid(
              batch_norm(g.param(x), g.param(gamma), g.param(beta), *st, true, 0.99, 1e-5)));
        },
        {&x, &gamma, &beta}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {4, 3});
    auto gamma = rand_param_away(rng, "gamma", {3}, 0.2);
    auto beta = rand_param(rng, "beta", {3});
    auto st = std::make_shared<BatchNormState<double>>(3);
    for (auto& v : st->running_mean) v = rng.uniform(-0.3, 0.3);
    for (auto& v : st->running_var) v = rng.uniform(0.5, 1.5);
    out.push_back(grad_check(
        "batch_norm_inference",
        [&, st](Graph<double>& g) {
          return mean_all(sigmoid(
              batch_norm(g.param(x), g.param(gamma), g.param(beta), *st, false, 0.99, 1e-5)));
        },
        {&x, &gamma, &beta}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {2, 3, 3, 4});
    auto gamma = rand_param_away(rng, "gamma", {4}, 0.2);
    auto beta = rand_param(rng, "beta", {4});
    out.push_back(grad_check(
        "group_norm",
        [&](Graph<double>& g) {
          return mean_all(
              sigmoid(group_norm(g.param(x), g.param(gamma), g.param(beta), 2, 1e-5)));
        },
        {&x, &gamma, &beta}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {4, 10});
    out.push_back(grad_check(
        "weight_standardize",
        [&](Graph<double>& g) {
          return mean_all(sigmoid(standardize_rows(g.param(x), 1e-5)));
        },
        {&x}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {4, 6});
    Array<double> probe({4, 6});
    for (auto& v : probe.data) v = rng.uniform();
    out.push_back(grad_check(
        "l2_normalize_rows",
        [&, probe](Graph<double>& g) {
          return mean_all(mul(l2_normalize_rows(g.param(x)), g.input(probe)));
        },
        {&x}, tolerance));
  }
  {
    auto x = rand_param(rng, "x", {3, 7});
    out.push_back(grad_check(
        "logsumexp_rows",
        [&](Graph<double>& g) { return mean_all(logsumexp_rows(g.param(x))); }, {&x},
        tolerance));
    std::vector<uint8_t> mask(21, 1);
    mask[2] = mask[9] = mask[15] = mask[16] = 0;
    out.push_back(grad_check(
        "masked_logsumexp_rows",
        [&, mask](Graph<double>& g) {
          return mean_all(masked_logsumexp_rows(g.param(x), mask));
        },
        {&x}, tolerance));
  }
  {
    auto x = rand_param(rng, "logits", {4, 5});
    out.push_back(grad_check(
        "softmax_xent",
        [&](Graph<double>& g) { return softmax_xent(g.param(x), {1, 0, 4, 2}); }, {&x},
        tolerance));
  }
  {
    auto x = rand_param(rng, "logits", {9});
    std::vector<double> targets;
    for (int i = 0; i < 9; ++i) targets.push_back(i % 2 ? 1.0 : 0.0);
    out.push_back(grad_check(
        "sigmoid_bce",
        [&, targets](Graph<double>& g) { return sigmoid_bce(g.param(x), targets); }, {&x},
        tolerance));
  }
  {
    auto x = rand_param(rng, "x", {5, 3});
    out.push_back(grad_check(
        "pairwise_sqdist",
        [&](Graph<double>& g) { return mean_all(pairwise_sqdist(g.param(x))); }, {&x},
        tolerance));
  }

  // --- losses through the model code, desk-miniature dimensions ---
  model::ModelConfig tiny;
  tiny.input_h = 8;
  tiny.input_w = 8;
  tiny.input_c = 1;
  tiny.channels = {2, 3};
  tiny.exemplar_outputs = 4;
  tiny.video_projection_dim = 4;
  tiny.classifier_outputs = 3;
  tiny.groupnorm_groups = 1;

  {
    model::PredictorConfig pc;
    pc.kind = model::PredictorKind::recurrent;
    pc.recurrent_hidden = 5;
    pc.recurrent_layers = 2;
    pc.k_shots = 3;
    auto m = std::make_shared<model::ModelBundle<double>>(
        model::build_model<double>(tiny, pc, seed));
    randomize_model(*m, rng);
    auto emb = rand_param(rng, "embeddings", {9, 4});  // 3 videos x 3 shots
    std::vector<Parameter<double>*> params = m->parameters();
    params.push_back(&emb);
    out.push_back(grad_check(
        "lstm_predict_sequence",
        [m, &emb](Graph<double>& g) {
          auto preds = model::predict_sequence(*m, g, g.param(emb), 3, 3);
          Var<double> total = mean_all(preds[0]);
          for (size_t i = 1; i < preds.size(); ++i)
            total = add(total, mean_all(preds[i]));
          return total;
        },
        params, tolerance));
    out.push_back(grad_check(
        "infonce_recurrent_pooled_negatives",
        [m, &emb](Graph<double>& g) {
          return loss::video_infonce_loss(*m, g, g.param(emb), 3, 3, true);
        },
        params, tolerance));
    out.push_back(grad_check(
        "infonce_recurrent_same_step",
        [m, &emb](Graph<double>& g) {
          return loss::video_infonce_loss(*m, g, g.param(emb), 3, 3, false);
        },
        params, tolerance));
  }
  {
    model::PredictorConfig pc;
    pc.kind = model::PredictorKind::pair_mlp;
    pc.mlp_hidden = 5;
    pc.mlp_output = 4;
    pc.k_shots = 2;
    auto m = std::make_shared<model::ModelBundle<double>>(
        model::build_model<double>(tiny, pc, seed + 1));
    randomize_model(*m, rng);
    auto emb = rand_param(rng, "embeddings", {8, 4});  // 4 videos x 2 shots
    std::vector<Parameter<double>*> params = m->parameters();
    params.push_back(&emb);
    out.push_back(grad_check(
        "infonce_pair_mlp",
        [m, &emb](Graph<double>& g) {
          return loss::video_infonce_loss(*m, g, g.param(emb), 4, 2, false);
        },
        params, tolerance));
  }
  {
    model::PredictorConfig pc;
    pc.kind = model::PredictorKind::order_mlp;
    pc.order_hidden = 6;
    pc.k_shots = 2;
    auto m = std::make_shared<model::ModelBundle<double>>(
        model::build_model<double>(tiny, pc, seed + 2));
    randomize_model(*m, rng);
    auto emb = rand_param(rng, "embeddings", {6, 4});  // 3 videos x 2 shots
    std::vector<Parameter<double>*> params = m->parameters();
    params.push_back(&emb);
    out.push_back(grad_check(
        "order_prediction_bce",
        [m, &emb](Graph<double>& g) {
          return loss::video_order_loss(*m, g, g.param(emb), 3, 2, {1, 0, 1});
        },
        params, tolerance));
  }
  {
    // triplet over L2-normalized embeddings; inputs away from mining ties
    auto emb = rand_param(rng, "embeddings", {8, 4});
    std::vector<int> classes = {0, 0, 1, 1, 2, 2, 3, 3};
    out.push_back(grad_check(
        "triplet_semihard",
        [&, classes](Graph<double>& g) {
          Var<double> e = l2_normalize_rows(g.param(emb));
          return loss::triplet_semihard_loss(e, classes, 0.5);
        },
        {&emb}, tolerance));
  }
  {
    auto m = std::make_shared<model::ModelBundle<double>>(
        model::build_model<double>(tiny, std::nullopt, seed + 3));
    randomize_model(*m, rng);
    auto frames = std::make_shared<Array<double>>(Shape{2, 8, 8, 1});
    for (auto& v : frames->data) v = rng.uniform(0.0, 1.0);
    out.push_back(grad_check(
        "rotation_cross_entropy",
        [m, frames](Graph<double>& g) {
          return loss::rotation_loss(*m, g, *frames, /*training=*/true);
        },
        m->parameters(), tolerance));
    std::vector<int> labels = {2, 0};
    out.push_back(grad_check(
        "supervised_cross_entropy",
        [m, frames, labels](Graph<double>& g) {
          return loss::supervised_ce_loss(*m, g, *frames, labels, /*training=*/true);
        },
        m->parameters(), tolerance));
  }
  {
    // combined total: exemplar triplet + recurrent InfoNCE + supervised CE
    model::ModelConfig cfg = tiny;
    cfg.norm = model::NormKind::group_norm_ws;
    model::PredictorConfig pc;
    pc.kind = model::PredictorKind::recurrent;
    pc.recurrent_hidden = 4;
    pc.recurrent_layers = 2;
    pc.k_shots = 2;
    auto m = std::make_shared<model::ModelBundle<double>>(
        model::build_model<double>(cfg, pc, seed + 4));
    randomize_model(*m, rng);
    // 2 videos x 2 shots x 2 frames
    auto frames = std::make_shared<Array<double>>(Shape{8, 8, 8, 1});
    for (auto& v : frames->data) v = rng.uniform(0.0, 1.0);
    auto images = std::make_shared<Array<double>>(Shape{3, 8, 8, 1});
    for (auto& v : images->data) v = rng.uniform(0.0, 1.0);
    loss::LossWeights w;
    w.lambda = 0.04;
    w.gamma = 1.0;
    w.video_enabled = true;
    w.supervised_enabled = true;
    out.push_back(grad_check(
        "combined_total",
        [m, frames, images, w](Graph<double>& g) {
          Var<double> x = g.input(*frames);
          Var<double> pre = model::encoder_forward(*m, g, x, true);
          std::vector<int> classes = {0, 0, 1, 1, 2, 2, 3, 3};
          Var<double> l_s = loss::exemplar_loss(*m, g, pre, classes, 0.5);
          Var<double> shots = model::pool_shot(pre, 2);
          Var<double> proj = model::apply_head(*m, g, shots, model::Head::video_projection);
          Var<double> l_v = loss::video_infonce_loss(*m, g, proj, 2, 2, true);
          Var<double> l_sup = loss::supervised_ce_loss(*m, g, *images, {0, 2, 1}, true);
          return loss::combine_total<double>(l_s, l_v, l_sup, w);
        },
        m->parameters(), tolerance));
  }
  return out;
}

}  // namespace vivi::ad
