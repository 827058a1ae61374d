#include "vivi/model.hpp"

#include <cmath>
#include <random>

#include "vivi/rng.hpp"

namespace vivi::model {

using ad::Array;
using ad::Graph;
using ad::Parameter;
using ad::Var;

void ModelConfig::validate(bool cotrain) const {
  if (input_h < 1 || input_w < 1 || input_c < 1) throw ConfigError("model: bad input size");
  if (channels.empty()) throw ConfigError("model: encoder needs at least one conv block");
  for (int64_t c : channels) {
    if (c < 1) throw ConfigError("model: channel widths must be >= 1");
  }
  if (width_mult < 1) throw ConfigError("model: width_mult must be >= 1");
  if (exemplar_outputs < 1 || rotation_outputs < 1 || video_projection_dim < 1) {
    throw ConfigError("model: head dims must be >= 1");
  }
  if (norm == NormKind::group_norm_ws) {
    for (int64_t c : channels) {
      if ((c * width_mult) % groupnorm_groups != 0) {
        throw ConfigError(strcat_msg("model: group count ", groupnorm_groups,
                                     " does not divide channel width ", c * width_mult));
      }
    }
  }
  if (cotrain) {
    if (classifier_outputs < 1) throw ConfigError("co-training requires a classifier head");
    if (norm != NormKind::group_norm_ws) {
      throw ConfigError("co-training requires the group-norm encoder");
    }
  }
}

void PredictorConfig::validate() const {
  if (horizon < 1) throw ConfigError("predictor: horizon must be >= 1");
  if (kind == PredictorKind::pair_mlp && k_shots != 2) {
    throw ConfigError("predictor: pair-mlp is only valid for K=2");
  }
  if (kind == PredictorKind::recurrent && k_shots < 2) {
    throw ConfigError("predictor: recurrent predictor requires K >= 2");
  }
  if (mlp_hidden < 1 || mlp_output < 1 || order_hidden < 1 || recurrent_hidden < 1 ||
      recurrent_layers < 1) {
    throw ConfigError("predictor: dims must be >= 1");
  }
}

namespace {

template <typename T>
Parameter<T> init_tensor(std::mt19937_64& rng, std::string name, Shape shape,
                         int64_t fan_in, bool wd_eligible) {
  Array<T> a(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : a.data) v = static_cast<T>(dist(rng));
  return Parameter<T>(std::move(name), std::move(a), wd_eligible);
}

template <typename T>
Parameter<T> init_const(std::string name, Shape shape, T value) {
  Array<T> a(shape);
  std::fill(a.data.begin(), a.data.end(), value);
  return Parameter<T>(std::move(name), std::move(a), /*wd=*/false);
}

template <typename T>
Dense<T> init_dense(std::mt19937_64& rng, const std::string& prefix, int64_t in, int64_t out) {
  Dense<T> d{init_tensor<T>(rng, prefix + "/w", {in, out}, in, true),
             init_const<T>(prefix + "/b", {out}, T(0))};
  return d;
}

}  // namespace

template <typename T>
ModelBundle<T> build_model(const ModelConfig& cfg, std::optional<PredictorConfig> pred,
                           uint64_t seed) {
  cfg.validate();
  if (pred) pred->validate();
  std::mt19937_64 rng = make_rng(seed, StreamTag::init);

  ModelBundle<T> m;
  m.cfg = cfg;
  m.pred_cfg = pred;

  int64_t cin = cfg.input_c;
  for (size_t i = 0; i < cfg.channels.size(); ++i) {
    const int64_t cout = cfg.channels[i] * cfg.width_mult;
    ConvBlock<T> b{
        init_tensor<T>(rng, strcat_msg("blocks/", i, "/kernel"), {cout, 3, 3, cin},
                       3 * 3 * cin, true),
        init_const<T>(strcat_msg("blocks/", i, "/gamma"), {cout}, T(1)),
        init_const<T>(strcat_msg("blocks/", i, "/beta"), {cout}, T(0)),
        ad::BatchNormState<T>(cout)};
    m.blocks.push_back(std::move(b));
    cin = cout;
  }
  const int64_t d = cfg.pre_logit_dim();
  m.exemplar_head = init_dense<T>(rng, "heads/exemplar", d, cfg.exemplar_outputs);
  m.rotation_head = init_dense<T>(rng, "heads/rotation", d, cfg.rotation_outputs);
  m.video_proj_head = init_dense<T>(rng, "heads/video_projection", d, cfg.video_projection_dim);
  if (cfg.classifier_outputs > 0) {
    m.classifier_head = init_dense<T>(rng, "heads/classifier", d, cfg.classifier_outputs);
  }

  if (pred) {
    const int64_t dp = cfg.video_projection_dim;
    switch (pred->kind) {
      case PredictorKind::pair_mlp: {
        m.phi1_hidden = init_dense<T>(rng, "pred/phi1/hidden", dp, pred->mlp_hidden);
        m.phi1_out = init_dense<T>(rng, "pred/phi1/out", pred->mlp_hidden, pred->mlp_output);
        m.phi2_hidden = init_dense<T>(rng, "pred/phi2/hidden", dp, pred->mlp_hidden);
        m.phi2_out = init_dense<T>(rng, "pred/phi2/out", pred->mlp_hidden, pred->mlp_output);
        break;
      }
      case PredictorKind::recurrent: {
        int64_t in = dp;
        const int64_t h = pred->recurrent_hidden;
        for (int l = 0; l < pred->recurrent_layers; ++l) {
          LstmLayer<T> layer{
              init_tensor<T>(rng, strcat_msg("pred/lstm/", l, "/w"), {in + h, 4 * h}, in + h,
                             true),
              init_const<T>(strcat_msg("pred/lstm/", l, "/b"), {4 * h}, T(0))};
          // forget-gate bias starts at 1
          for (int64_t j = h; j < 2 * h; ++j) layer.b.value.data[static_cast<size_t>(j)] = T(1);
          m.lstm.push_back(std::move(layer));
          in = h;
        }
        m.lstm_out = init_dense<T>(rng, "pred/lstm/out", h, dp);
        break;
      }
      case PredictorKind::order_mlp: {
        m.order_hidden =
            init_dense<T>(rng, "pred/order/hidden", pred->k_shots * dp, pred->order_hidden);
        m.order_out = init_dense<T>(rng, "pred/order/out", pred->order_hidden, 1);
        break;
      }
    }
  }
  return m;
}

template <typename T>
std::vector<Parameter<T>*> ModelBundle<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& b : blocks) {
    out.push_back(&b.kernel);
    out.push_back(&b.gamma);
    out.push_back(&b.beta);
  }
  auto push_dense = [&out](std::optional<Dense<T>>& d) {
    if (d) {
      out.push_back(&d->w);
      out.push_back(&d->b);
    }
  };
  out.push_back(&exemplar_head.w);
  out.push_back(&exemplar_head.b);
  out.push_back(&rotation_head.w);
  out.push_back(&rotation_head.b);
  out.push_back(&video_proj_head.w);
  out.push_back(&video_proj_head.b);
  push_dense(classifier_head);
  for (auto& l : lstm) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  push_dense(lstm_out);
  push_dense(phi1_hidden);
  push_dense(phi1_out);
  push_dense(phi2_hidden);
  push_dense(phi2_out);
  push_dense(order_hidden);
  push_dense(order_out);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<T>*>> ModelBundle<T>::buffers() {
  std::vector<std::pair<std::string, std::vector<T>*>> out;
  for (size_t i = 0; i < blocks.size(); ++i) {
    out.emplace_back(strcat_msg("blocks/", i, "/bn_mean"), &blocks[i].bn_state.running_mean);
    out.emplace_back(strcat_msg("blocks/", i, "/bn_var"), &blocks[i].bn_state.running_var);
  }
  return out;
}

template <typename T>
Var<T> encoder_forward(ModelBundle<T>& m, Graph<T>& g, Var<T> frames, bool training) {
  const Shape& s = g.shape(frames);
  if (s.size() != 4 || s[1] != m.cfg.input_h || s[2] != m.cfg.input_w ||
      s[3] != m.cfg.input_c) {
    throw ShapeError(strcat_msg("encode_frame: input ", shape_str(s), " does not match (*,",
                                m.cfg.input_h, ",", m.cfg.input_w, ",", m.cfg.input_c, ")"));
  }
  Var<T> h = frames;
  for (auto& b : m.blocks) {
    Var<T> k = g.param(b.kernel);
    if (m.cfg.norm == NormKind::group_norm_ws) {
      k = ad::weight_standardize(k, static_cast<T>(m.cfg.ws_eps));
    }
    h = ad::conv2d(h, k, std::optional<Var<T>>{}, /*stride=*/2, ad::Padding::same);
    Var<T> gamma = g.param(b.gamma);
    Var<T> beta = g.param(b.beta);
    if (m.cfg.norm == NormKind::group_norm_ws) {
      h = ad::group_norm(h, gamma, beta, m.cfg.groupnorm_groups,
                         static_cast<T>(m.cfg.norm_eps));
    } else {
      h = ad::batch_norm(h, gamma, beta, b.bn_state, training,
                         static_cast<T>(m.cfg.bn_momentum), static_cast<T>(m.cfg.norm_eps));
    }
    h = ad::relu(h);
  }
  return ad::global_avg_pool(h);
}

template <typename T>
Array<T> encode_frames(ModelBundle<T>& m, const Array<T>& frames) {
  Graph<T> g;
  Var<T> x = g.input(frames);
  Var<T> pre = encoder_forward(m, g, x, /*training=*/false);
  return g.value(pre);
}

template <typename T>
Var<T> apply_head(ModelBundle<T>& m, Graph<T>& g, Var<T> pre_logits, Head head) {
  switch (head) {
    case Head::exemplar: {
      Var<T> y = ad::linear(pre_logits, g.param(m.exemplar_head.w),
                            std::optional<Var<T>>(g.param(m.exemplar_head.b)));
      return ad::l2_normalize_rows(y);
    }
    case Head::rotation:
      return ad::linear(pre_logits, g.param(m.rotation_head.w),
                        std::optional<Var<T>>(g.param(m.rotation_head.b)));
    case Head::video_projection:
      return ad::linear(pre_logits, g.param(m.video_proj_head.w),
                        std::optional<Var<T>>(g.param(m.video_proj_head.b)));
    case Head::classifier:
      if (!m.classifier_head) throw Error("apply_head: classifier head not configured");
      return ad::linear(pre_logits, g.param(m.classifier_head->w),
                        std::optional<Var<T>>(g.param(m.classifier_head->b)));
  }
  throw Error("apply_head: unknown head");
}

template <typename T>
Var<T> pool_shot(Var<T> frame_embeddings, int64_t frames_per_shot) {
  return ad::pool_rows(frame_embeddings, frames_per_shot);
}

template <typename T>
Array<T> pool_shot(const Array<T>& frame_embeddings) {
  if (frame_embeddings.shape.size() != 2 || frame_embeddings.shape[0] < 1) {
    throw ShapeError(strcat_msg("pool_shot: expected a nonempty (L,D) input, got ",
                                shape_str(frame_embeddings.shape)));
  }
  const int64_t l = frame_embeddings.shape[0], d = frame_embeddings.shape[1];
  Array<T> out({d});
  for (int64_t i = 0; i < l; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      out.data[static_cast<size_t>(j)] +=
          frame_embeddings.data[static_cast<size_t>(i * d + j)];
    }
  }
  for (auto& v : out.data) v /= static_cast<T>(l);
  return out;
}

namespace {

template <typename T>
Var<T> dense_fwd(Graph<T>& g, Dense<T>& d, Var<T> x) {
  return ad::linear(x, g.param(d.w), std::optional<Var<T>>(g.param(d.b)));
}

}  // namespace

template <typename T>
Var<T> pair_score_matrix(ModelBundle<T>& m, Graph<T>& g, Var<T> e, Var<T> e_prime) {
  if (!m.phi1_hidden) throw Error("score_pair: pair-mlp predictor not configured");
  Var<T> a = dense_fwd(g, *m.phi1_out, ad::relu(dense_fwd(g, *m.phi1_hidden, e)));
  Var<T> b = dense_fwd(g, *m.phi2_out, ad::relu(dense_fwd(g, *m.phi2_hidden, e_prime)));
  return ad::matmul_nt(a, b);
}

template <typename T>
T score_pair(ModelBundle<T>& m, const Array<T>& e, const Array<T>& e_prime) {
  if (e.shape != e_prime.shape) {
    throw ShapeError(strcat_msg("score_pair: shape mismatch ", shape_str(e.shape), " vs ",
                                shape_str(e_prime.shape)));
  }
  Graph<T> g;
  const int64_t d = e.numel();
  Var<T> ve = g.input(Array<T>({1, d}, e.data));
  Var<T> vp = g.input(Array<T>({1, d}, e_prime.data));
  Var<T> s = pair_score_matrix(m, g, ve, vp);
  return g.data(s)[0];
}

namespace {

template <typename T>
std::pair<Var<T>, Var<T>> lstm_cell(Var<T> x, Var<T> h, Var<T> c, Var<T> w, Var<T> b,
                                    int64_t hidden) {
  Var<T> z = ad::concat_cols<T>({x, h});
  Var<T> gates = ad::linear(z, w, std::optional<Var<T>>(b));
  Var<T> i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
  Var<T> f = ad::sigmoid(ad::slice_cols(gates, hidden, 2 * hidden));
  Var<T> gc = ad::tanh_act(ad::slice_cols(gates, 2 * hidden, 3 * hidden));
  Var<T> o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, 4 * hidden));
  Var<T> c2 = ad::add(ad::mul(f, c), ad::mul(i, gc));
  Var<T> h2 = ad::mul(o, ad::tanh_act(c2));
  return {h2, c2};
}

// Reorder video-major (V*K, D) rows into time-major step slices.
template <typename T>
std::vector<Var<T>> time_slices(Graph<T>& g, Var<T> shot_embeddings, int64_t v, int64_t k) {
  const Shape& s = g.shape(shot_embeddings);
  const int64_t d = s[1];
  std::vector<Var<T>> out;
  out.reserve(static_cast<size_t>(k));
  for (int64_t step = 0; step < k; ++step) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(v * d));
    for (int64_t vi = 0; vi < v; ++vi) {
      const int64_t row = vi * k + step;
      for (int64_t di = 0; di < d; ++di) idx.push_back(row * d + di);
    }
    out.push_back(ad::reshape(ad::gather(shot_embeddings, std::move(idx)), {v, d}));
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<Var<T>> predict_sequence(ModelBundle<T>& m, Graph<T>& g, Var<T> shot_embeddings,
                                     int64_t videos, int64_t k_shots) {
  if (!m.pred_cfg || m.pred_cfg->kind != PredictorKind::recurrent || m.lstm.empty()) {
    throw Error("predict_sequence: recurrent predictor not configured");
  }
  if (k_shots < 2) throw Error("predict_sequence: K must be >= 2");
  const Shape& s = g.shape(shot_embeddings);
  if (s.size() != 2 || s[0] != videos * k_shots) {
    throw ShapeError(strcat_msg("predict_sequence: expected (", videos * k_shots,
                                ",D) embeddings, got ", shape_str(s)));
  }
  const int64_t hidden = m.pred_cfg->recurrent_hidden;
  std::vector<Var<T>> steps = time_slices(g, shot_embeddings, videos, k_shots);

  std::vector<Var<T>> ws, bs;
  for (auto& l : m.lstm) {
    ws.push_back(g.param(l.w));
    bs.push_back(g.param(l.b));
  }
  Var<T> wout = g.param(m.lstm_out->w);
  Var<T> bout = g.param(m.lstm_out->b);

  std::vector<Var<T>> h(m.lstm.size()), c(m.lstm.size());
  for (size_t l = 0; l < m.lstm.size(); ++l) {
    h[l] = g.input(Array<T>({videos, hidden}));
    c[l] = g.input(Array<T>({videos, hidden}));
  }
  std::vector<Var<T>> predictions;
  for (int64_t step = 0; step + 1 < k_shots; ++step) {
    Var<T> x = steps[static_cast<size_t>(step)];
    for (size_t l = 0; l < m.lstm.size(); ++l) {
      auto [h2, c2] = lstm_cell(x, h[l], c[l], ws[l], bs[l], hidden);
      h[l] = h2;
      c[l] = c2;
      x = h2;
    }
    predictions.push_back(ad::linear(x, wout, std::optional<Var<T>>(bout)));
  }
  return predictions;
}

template <typename T>
Var<T> order_logit(ModelBundle<T>& m, Graph<T>& g, Var<T> shot_embeddings, int64_t videos,
                   int64_t k_shots) {
  if (!m.order_hidden) throw Error("order_logit: order predictor not configured");
  if (k_shots != m.pred_cfg->k_shots) {
    throw ShapeError(strcat_msg("order_logit: predictor is wired for K=", m.pred_cfg->k_shots,
                                ", got K=", k_shots));
  }
  const Shape& s = g.shape(shot_embeddings);
  if (s.size() != 2 || s[0] != videos * k_shots) {
    throw ShapeError(strcat_msg("order_logit: expected (", videos * k_shots,
                                ",D) embeddings, got ", shape_str(s)));
  }
  Var<T> flat = ad::reshape(shot_embeddings, {videos, k_shots * s[1]});
  Var<T> hid = ad::relu(dense_fwd(g, *m.order_hidden, flat));
  Var<T> logit = dense_fwd(g, *m.order_out, hid);
  return ad::reshape(logit, {videos});
}

#define VIVI_INSTANTIATE_MODEL(T)                                                          \
  template struct ModelBundle<T>;                                                          \
  template ModelBundle<T> build_model<T>(const ModelConfig&, std::optional<PredictorConfig>,\
                                         uint64_t);                                        \
  template Var<T> encoder_forward<T>(ModelBundle<T>&, Graph<T>&, Var<T>, bool);            \
  template Array<T> encode_frames<T>(ModelBundle<T>&, const Array<T>&);                    \
  template Var<T> apply_head<T>(ModelBundle<T>&, Graph<T>&, Var<T>, Head);                 \
  template Var<T> pool_shot<T>(Var<T>, int64_t);                                           \
  template Array<T> pool_shot<T>(const Array<T>&);                                         \
  template Var<T> pair_score_matrix<T>(ModelBundle<T>&, Graph<T>&, Var<T>, Var<T>);        \
  template T score_pair<T>(ModelBundle<T>&, const Array<T>&, const Array<T>&);             \
  template std::vector<Var<T>> predict_sequence<T>(ModelBundle<T>&, Graph<T>&, Var<T>,     \
                                                   int64_t, int64_t);                      \
  template Var<T> order_logit<T>(ModelBundle<T>&, Graph<T>&, Var<T>, int64_t, int64_t);

VIVI_INSTANTIATE_MODEL(float)
VIVI_INSTANTIATE_MODEL(double)

#undef VIVI_INSTANTIATE_MODEL

}  // namespace vivi::model
