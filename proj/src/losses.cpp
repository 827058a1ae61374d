#include "vivi/losses.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace vivi::loss {

using ad::Array;
using ad::Graph;
using ad::Var;

void LossWeights::validate(bool frame_loss_is_triplet) const {
  if (!frame_enabled && !video_enabled && !supervised_enabled) {
    throw ConfigError("loss weights: at least one loss must be enabled");
  }
  if (lambda < 0.0 || gamma < 0.0) {
    throw ConfigError("loss weights: lambda and gamma must be >= 0");
  }
  if (frame_enabled && frame_loss_is_triplet && margin <= 0.0) {
    throw ConfigError("loss weights: triplet margin must be > 0");
  }
}

template <typename T>
TripletSelection mine_semihard(const std::vector<T>& dist, const std::vector<int>& classes,
                               int64_t batch, T margin) {
  if (static_cast<int64_t>(classes.size()) != batch ||
      static_cast<int64_t>(dist.size()) != batch * batch) {
    throw ShapeError(strcat_msg("mine_semihard: ", classes.size(), " classes / ",
                                dist.size(), " distances for batch ", batch));
  }
  std::unordered_set<int> distinct(classes.begin(), classes.end());
  if (distinct.size() < 2) {
    throw Error("mine_semihard: a single class in the batch leaves no negatives");
  }
  TripletSelection sel;
  for (int64_t a = 0; a < batch; ++a) {
    for (int64_t p = 0; p < batch; ++p) {
      if (p == a || classes[static_cast<size_t>(p)] != classes[static_cast<size_t>(a)]) {
        continue;
      }
      const T d_ap = dist[static_cast<size_t>(a * batch + p)];
      int64_t band_pick = -1, global_pick = -1;
      T band_best = T(0), global_best = T(0);
      for (int64_t n = 0; n < batch; ++n) {
        if (classes[static_cast<size_t>(n)] == classes[static_cast<size_t>(a)]) continue;
        const T d_an = dist[static_cast<size_t>(a * batch + n)];
        if (global_pick < 0 || d_an < global_best) {
          global_best = d_an;
          global_pick = n;
        }
        if (d_an > d_ap && d_an < d_ap + margin && (band_pick < 0 || d_an < band_best)) {
          band_best = d_an;
          band_pick = n;
        }
      }
      const int64_t n = band_pick >= 0 ? band_pick : global_pick;
      sel.ap_flat.push_back(a * batch + p);
      sel.an_flat.push_back(a * batch + n);
    }
  }
  if (sel.ap_flat.empty()) {
    throw Error("mine_semihard: no anchor-positive pairs (every class has one member)");
  }
  return sel;
}

template <typename T>
Var<T> triplet_semihard_loss(Var<T> embeddings, const std::vector<int>& classes, T margin) {
  Graph<T>& g = *embeddings.g;
  const Shape& s = g.shape(embeddings);
  if (s.size() != 2) {
    throw ShapeError(strcat_msg("triplet_semihard_loss expects (B,E) embeddings, got ",
                                shape_str(s)));
  }
  if (margin <= T(0)) throw ConfigError("triplet_semihard_loss: margin must be > 0");
  const int64_t b = s[0];
  Var<T> dist = ad::pairwise_sqdist(embeddings);
  TripletSelection sel = mine_semihard(g.data(dist), classes, b, margin);
  Var<T> d_ap = ad::gather(dist, sel.ap_flat);
  Var<T> d_an = ad::gather(dist, sel.an_flat);
  Var<T> terms = ad::relu(ad::add_scalar(ad::sub(d_ap, d_an), margin));
  return ad::mean_all(terms);
}

template <typename T>
Array<T> rotate_batch(const Array<T>& frames, int quarter_turns) {
  if (frames.shape.size() != 4) {
    throw ShapeError(strcat_msg("rotate_batch expects (B,H,W,C), got ",
                                shape_str(frames.shape)));
  }
  const int64_t B = frames.shape[0], H = frames.shape[1], W = frames.shape[2],
                C = frames.shape[3];
  if (H != W) throw ShapeError("rotate_batch: frames must be square");
  const int r = ((quarter_turns % 4) + 4) % 4;
  Array<T> out(frames.shape);
  const int64_t n = H;
  for (int64_t b = 0; b < B; ++b) {
    const T* src = frames.data.data() + b * H * W * C;
    T* dst = out.data.data() + b * H * W * C;
    for (int64_t y = 0; y < n; ++y) {
      for (int64_t x = 0; x < n; ++x) {
        int64_t sy = y, sx = x;
        switch (r) {
          case 0: break;
          case 1: sy = x; sx = n - 1 - y; break;          // 90 degrees ccw
          case 2: sy = n - 1 - y; sx = n - 1 - x; break;  // 180
          case 3: sy = n - 1 - x; sx = y; break;          // 270
        }
        std::memcpy(dst + (y * n + x) * C, src + (sy * n + sx) * C,
                    static_cast<size_t>(C) * sizeof(T));
      }
    }
  }
  return out;
}

template <typename T>
Array<T> make_rotated_copies(const Array<T>& frames) {
  if (frames.shape.size() != 4 || frames.shape[1] != frames.shape[2]) {
    throw ShapeError(strcat_msg("rotation_loss: frames must be square (B,H,H,C), got ",
                                shape_str(frames.shape)));
  }
  const int64_t B = frames.shape[0];
  Array<T> out({B * 4, frames.shape[1], frames.shape[2], frames.shape[3]});
  const size_t per = frames.data.size();
  std::memcpy(out.data.data(), frames.data.data(), per * sizeof(T));
  for (int r = 1; r < 4; ++r) {
    Array<T> rot = rotate_batch(frames, r);
    std::memcpy(out.data.data() + static_cast<size_t>(r) * per, rot.data.data(),
                per * sizeof(T));
  }
  return out;
}

template <typename T>
Var<T> rotation_loss(model::ModelBundle<T>& m, Graph<T>& g, const Array<T>& frames,
                     bool training, Var<T>* prelogits_0deg) {
  Array<T> copies = make_rotated_copies(frames);
  const int64_t B = frames.shape[0];
  Var<T> x = g.input(std::move(copies));
  Var<T> pre = model::encoder_forward(m, g, x, training);
  if (prelogits_0deg) *prelogits_0deg = ad::take_rows(pre, 0, B);
  Var<T> logits = model::apply_head(m, g, pre, model::Head::rotation);
  std::vector<int> labels(static_cast<size_t>(4 * B));
  for (int r = 0; r < 4; ++r) {
    for (int64_t i = 0; i < B; ++i) labels[static_cast<size_t>(r * B + i)] = r;
  }
  return ad::softmax_xent(logits, std::move(labels));
}

template <typename T>
Var<T> infonce_loss(Var<T> scores) {
  Graph<T>& g = *scores.g;
  const Shape& s = g.shape(scores);
  if (s.size() != 2 || s[0] != s[1]) {
    throw ShapeError(strcat_msg("infonce_loss expects a square score matrix, got ",
                                shape_str(s)));
  }
  const int64_t n = s[0];
  if (n < 2) throw Error("infonce_loss: need at least 2 videos for negatives");
  Var<T> lse = ad::logsumexp_rows(scores);
  std::vector<int64_t> diag(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = i * n + i;
  Var<T> pos = ad::gather(scores, std::move(diag));
  Var<T> per_row = ad::sub(lse, pos);
  return ad::add_scalar(ad::mean_all(per_row), static_cast<T>(-std::log(static_cast<double>(n))));
}

template <typename T>
Var<T> infonce_loss_general(Var<T> scores, const std::vector<int64_t>& positive_col,
                            std::vector<uint8_t> mask) {
  Graph<T>& g = *scores.g;
  const Shape& s = g.shape(scores);
  if (s.size() != 2) {
    throw ShapeError(strcat_msg("infonce_loss_general expects (R,C) scores, got ",
                                shape_str(s)));
  }
  const int64_t r = s[0], c = s[1];
  if (static_cast<int64_t>(positive_col.size()) != r ||
      static_cast<int64_t>(mask.size()) != r * c) {
    throw ShapeError("infonce_loss_general: positive/mask sizes do not match scores");
  }
  double mean_log_count = 0.0;
  std::vector<int64_t> pos_flat(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const int64_t p = positive_col[static_cast<size_t>(i)];
    if (p < 0 || p >= c || !mask[static_cast<size_t>(i * c + p)]) {
      throw Error(strcat_msg("infonce_loss_general: positive column ", p,
                             " of row ", i, " is not in the candidate mask"));
    }
    int64_t count = 0;
    for (int64_t j = 0; j < c; ++j) count += mask[static_cast<size_t>(i * c + j)] ? 1 : 0;
    if (count < 2) throw Error("infonce_loss_general: a row has no negatives");
    mean_log_count += std::log(static_cast<double>(count));
    pos_flat[static_cast<size_t>(i)] = i * c + p;
  }
  mean_log_count /= static_cast<double>(r);
  Var<T> lse = ad::masked_logsumexp_rows(scores, std::move(mask));
  Var<T> pos = ad::gather(scores, std::move(pos_flat));
  Var<T> per_row = ad::sub(lse, pos);
  return ad::add_scalar(ad::mean_all(per_row), static_cast<T>(-mean_log_count));
}

template <typename T>
Var<T> order_prediction_loss(Var<T> logits, const std::vector<int>& labels) {
  Graph<T>& g = *logits.g;
  if (g.data(logits).size() != labels.size()) {
    throw ShapeError(strcat_msg("order_prediction_loss: ", labels.size(), " labels for ",
                                g.data(logits).size(), " logits"));
  }
  std::vector<T> targets(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw Error(strcat_msg("order_prediction_loss: label ", labels[i], " not in {0,1}"));
    }
    targets[i] = static_cast<T>(labels[i]);
  }
  return ad::sigmoid_bce(logits, std::move(targets));
}

template <typename T>
Var<T> supervised_ce_loss(model::ModelBundle<T>& m, Graph<T>& g, const Array<T>& images,
                          const std::vector<int>& labels, bool training) {
  if (!m.classifier_head) throw Error("supervised_ce_loss: classifier head not configured");
  Var<T> x = g.input(images);
  Var<T> pre = model::encoder_forward(m, g, x, training);
  Var<T> logits = model::apply_head(m, g, pre, model::Head::classifier);
  return ad::softmax_xent(logits, labels);
}

template <typename T>
Var<T> combine_total(std::optional<Var<T>> l_s, std::optional<Var<T>> l_v,
                     std::optional<Var<T>> l_sup, const LossWeights& w) {
  w.validate(/*frame_loss_is_triplet=*/false);
  if (w.frame_enabled && !l_s) throw Error("combine_total: frame loss enabled but absent");
  if (w.video_enabled && !l_v) throw Error("combine_total: video loss enabled but absent");
  if (w.supervised_enabled && !l_sup) {
    throw Error("combine_total: supervised loss enabled but absent");
  }
  std::optional<Var<T>> total;
  auto accumulate = [&total](Var<T> term) {
    total = total ? ad::add(*total, term) : term;
  };
  if (w.frame_enabled) accumulate(*l_s);
  if (w.video_enabled) accumulate(ad::scale(*l_v, static_cast<T>(w.lambda)));
  if (w.supervised_enabled) accumulate(ad::scale(*l_sup, static_cast<T>(w.gamma)));
  return *total;
}

template <typename T>
Var<T> exemplar_loss(model::ModelBundle<T>& m, Graph<T>& g, Var<T> pre_logits,
                     const std::vector<int>& classes, T margin) {
  Var<T> emb = model::apply_head(m, g, pre_logits, model::Head::exemplar);
  return triplet_semihard_loss(emb, classes, margin);
}

namespace {

// Candidate mask over all V*K shot columns for prediction row i at a given
// step: every shot of every other video, plus the positive itself.
std::vector<uint8_t> pooled_mask(int64_t videos, int64_t k_shots, int64_t step) {
  (void)step;
  std::vector<uint8_t> mask(static_cast<size_t>(videos * videos * k_shots), 0);
  const int64_t cols = videos * k_shots;
  for (int64_t i = 0; i < videos; ++i) {
    for (int64_t j = 0; j < videos; ++j) {
      if (j == i) continue;
      for (int64_t k = 0; k < k_shots; ++k) mask[static_cast<size_t>(i * cols + j * k_shots + k)] = 1;
    }
  }
  return mask;
}

}  // namespace

template <typename T>
Var<T> video_infonce_loss(model::ModelBundle<T>& m, Graph<T>& g, Var<T> projected,
                          int64_t videos, int64_t k_shots, bool all_steps_negatives) {
  if (!m.pred_cfg) throw Error("video_infonce_loss: no predictor configured");
  if (videos < 2) throw Error("infonce_loss: need at least 2 videos for negatives");
  const Shape& s = g.shape(projected);
  if (s.size() != 2 || s[0] != videos * k_shots) {
    throw ShapeError(strcat_msg("video_infonce_loss: expected (", videos * k_shots,
                                ",D'), got ", shape_str(s)));
  }
  const int64_t d = s[1];

  // time-major step slices of the true embeddings
  std::vector<Var<T>> truth;
  for (int64_t k = 0; k < k_shots; ++k) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(videos * d));
    for (int64_t v = 0; v < videos; ++v) {
      for (int64_t di = 0; di < d; ++di) idx.push_back((v * k_shots + k) * d + di);
    }
    truth.push_back(ad::reshape(ad::gather(projected, std::move(idx)), {videos, d}));
  }

  std::optional<Var<T>> total;
  int64_t steps = 0;
  auto accumulate = [&](Var<T> term) {
    total = total ? ad::add(*total, term) : term;
    ++steps;
  };

  if (m.pred_cfg->kind == model::PredictorKind::pair_mlp) {
    if (k_shots != 2) throw Error("video_infonce_loss: pair-mlp predictor requires K=2");
    if (!all_steps_negatives) {
      accumulate(infonce_loss(model::pair_score_matrix(m, g, truth[0], truth[1])));
    } else {
      Var<T> scores = model::pair_score_matrix(m, g, truth[0], projected);
      std::vector<uint8_t> mask = pooled_mask(videos, k_shots, 1);
      std::vector<int64_t> pos(static_cast<size_t>(videos));
      for (int64_t i = 0; i < videos; ++i) {
        pos[static_cast<size_t>(i)] = i * k_shots + 1;
        mask[static_cast<size_t>(i * videos * k_shots + i * k_shots + 1)] = 1;
      }
      accumulate(infonce_loss_general(scores, pos, std::move(mask)));
    }
  } else if (m.pred_cfg->kind == model::PredictorKind::recurrent) {
    std::vector<Var<T>> preds = model::predict_sequence(m, g, projected, videos, k_shots);
    for (int64_t step = 0; step + 1 < k_shots; ++step) {
      Var<T> pred = preds[static_cast<size_t>(step)];
      if (!all_steps_negatives) {
        accumulate(infonce_loss(ad::matmul_nt(pred, truth[static_cast<size_t>(step + 1)])));
      } else {
        Var<T> scores = ad::matmul_nt(pred, projected);
        std::vector<uint8_t> mask = pooled_mask(videos, k_shots, step + 1);
        std::vector<int64_t> pos(static_cast<size_t>(videos));
        for (int64_t i = 0; i < videos; ++i) {
          pos[static_cast<size_t>(i)] = i * k_shots + step + 1;
          mask[static_cast<size_t>(i * videos * k_shots + i * k_shots + step + 1)] = 1;
        }
        accumulate(infonce_loss_general(scores, pos, std::move(mask)));
      }
    }
  } else {
    throw Error("video_infonce_loss: predictor must be pair-mlp or recurrent");
  }
  return steps > 1 ? ad::scale(*total, T(1) / static_cast<T>(steps)) : *total;
}

template <typename T>
Var<T> video_order_loss(model::ModelBundle<T>& m, Graph<T>& g, Var<T> projected,
                        int64_t videos, int64_t k_shots, const std::vector<int>& reversed) {
  if (static_cast<int64_t>(reversed.size()) != videos) {
    throw ShapeError(strcat_msg("video_order_loss: ", reversed.size(), " flags for ",
                                videos, " videos"));
  }
  const Shape& s = g.shape(projected);
  if (s.size() != 2 || s[0] != videos * k_shots) {
    throw ShapeError(strcat_msg("video_order_loss: expected (", videos * k_shots,
                                ",D'), got ", shape_str(s)));
  }
  const int64_t d = s[1];
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(videos * k_shots * d));
  for (int64_t v = 0; v < videos; ++v) {
    for (int64_t k = 0; k < k_shots; ++k) {
      const int64_t src_k = reversed[static_cast<size_t>(v)] ? k_shots - 1 - k : k;
      const int64_t row = v * k_shots + src_k;
      for (int64_t di = 0; di < d; ++di) idx.push_back(row * d + di);
    }
  }
  Var<T> ordered = ad::reshape(ad::gather(projected, std::move(idx)), {videos * k_shots, d});
  Var<T> logits = model::order_logit(m, g, ordered, videos, k_shots);
  return order_prediction_loss(logits, reversed);
}

#define VIVI_INSTANTIATE_LOSSES(T)                                                        \
  template TripletSelection mine_semihard<T>(const std::vector<T>&, const std::vector<int>&, \
                                             int64_t, T);                                 \
  template Var<T> triplet_semihard_loss<T>(Var<T>, const std::vector<int>&, T);           \
  template Array<T> rotate_batch<T>(const Array<T>&, int);                                \
  template Array<T> make_rotated_copies<T>(const Array<T>&);                              \
  template Var<T> rotation_loss<T>(model::ModelBundle<T>&, Graph<T>&, const Array<T>&,    \
                                   bool, Var<T>*);                                        \
  template Var<T> infonce_loss<T>(Var<T>);                                                \
  template Var<T> infonce_loss_general<T>(Var<T>, const std::vector<int64_t>&,            \
                                          std::vector<uint8_t>);                          \
  template Var<T> order_prediction_loss<T>(Var<T>, const std::vector<int>&);              \
  template Var<T> supervised_ce_loss<T>(model::ModelBundle<T>&, Graph<T>&,                \
                                        const Array<T>&, const std::vector<int>&, bool);  \
  template Var<T> combine_total<T>(std::optional<Var<T>>, std::optional<Var<T>>,          \
                                   std::optional<Var<T>>, const LossWeights&);            \
  template Var<T> exemplar_loss<T>(model::ModelBundle<T>&, Graph<T>&, Var<T>,             \
                                   const std::vector<int>&, T);                           \
  template Var<T> video_infonce_loss<T>(model::ModelBundle<T>&, Graph<T>&, Var<T>,        \
                                        int64_t, int64_t, bool);                          \
  template Var<T> video_order_loss<T>(model::ModelBundle<T>&, Graph<T>&, Var<T>, int64_t, \
                                      int64_t, const std::vector<int>&);

VIVI_INSTANTIATE_LOSSES(float)
VIVI_INSTANTIATE_LOSSES(double)

#undef VIVI_INSTANTIATE_LOSSES

}  // namespace vivi::loss
