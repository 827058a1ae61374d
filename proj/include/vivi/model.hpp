#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vivi/graph.hpp"

namespace vivi::model {

enum class NormKind { batch_norm, group_norm_ws };
enum class Head { exemplar, rotation, classifier, video_projection };
enum class PredictorKind { pair_mlp, recurrent, order_mlp };

struct ModelConfig {
  int64_t input_h = 32;
  int64_t input_w = 32;
  int64_t input_c = 3;
  std::vector<int64_t> channels = {16, 32, 64, 128};  // one stride-2 conv block each
  int width_mult = 1;                                 // capacity knob ("wider" variant)
  NormKind norm = NormKind::batch_norm;
  int groupnorm_groups = 8;
  int64_t exemplar_outputs = 64;
  int64_t rotation_outputs = 4;
  int64_t video_projection_dim = 64;
  int64_t classifier_outputs = 0;  // 0 = head absent
  double norm_eps = 1e-5;
  double ws_eps = 1e-5;
  double bn_momentum = 0.99;

  int64_t pre_logit_dim() const { return channels.back() * width_mult; }
  void validate(bool cotrain = false) const;
};

struct PredictorConfig {
  PredictorKind kind = PredictorKind::recurrent;
  int64_t mlp_hidden = 64;        // pair mlp hidden width
  int64_t mlp_output = 32;        // pair mlp output width
  int64_t order_hidden = 64;      // order mlp hidden width
  int64_t recurrent_hidden = 64;
  int recurrent_layers = 2;
  int64_t horizon = 1;
  int64_t k_shots = 2;  // K this predictor is wired for

  void validate() const;
};

template <typename T>
struct Dense {
  ad::Parameter<T> w;  // (in, out)
  ad::Parameter<T> b;  // (out)
};

template <typename T>
struct ConvBlock {
  ad::Parameter<T> kernel;  // (Cout, KH, KW, Cin)
  ad::Parameter<T> gamma;   // (Cout)
  ad::Parameter<T> beta;    // (Cout)
  ad::BatchNormState<T> bn_state;
};

template <typename T>
struct LstmLayer {
  ad::Parameter<T> w;  // (in + hidden, 4*hidden), gate order [i, f, g, o]
  ad::Parameter<T> b;  // (4*hidden), forget gate bias initialized to 1
};

// Frame encoder f, pooling p, task heads, and the video-level predictors g_m.
template <typename T>
struct ModelBundle {
  ModelConfig cfg;
  std::optional<PredictorConfig> pred_cfg;

  std::vector<ConvBlock<T>> blocks;
  Dense<T> exemplar_head;
  Dense<T> rotation_head;
  Dense<T> video_proj_head;
  std::optional<Dense<T>> classifier_head;

  // recurrent predictor
  std::vector<LstmLayer<T>> lstm;
  std::optional<Dense<T>> lstm_out;
  // pair scorer g(e,e') = phi1(e)^T phi2(e')
  std::optional<Dense<T>> phi1_hidden, phi1_out, phi2_hidden, phi2_out;
  // order predictor
  std::optional<Dense<T>> order_hidden, order_out;

  std::vector<ad::Parameter<T>*> parameters();
  std::vector<std::pair<std::string, std::vector<T>*>> buffers();  // BN running stats
};

template <typename T>
ModelBundle<T> build_model(const ModelConfig& cfg, std::optional<PredictorConfig> pred,
                           uint64_t seed);

// Encoder forward on a frame batch node (B,H,W,C) -> pre-logits (B,D).
template <typename T>
ad::Var<T> encoder_forward(ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> frames,
                           bool training);

// Inference-mode encoding of raw frames; returns a (B,D) array.
template <typename T>
ad::Array<T> encode_frames(ModelBundle<T>& m, const ad::Array<T>& frames);

// The convolution kernels exactly as the encoder consumes them: standardized
// per output channel in group-norm mode, raw otherwise.
template <typename T>
std::vector<ad::Array<T>> standardized_kernels(ModelBundle<T>& m);

// Linear task heads over pre-logits. The exemplar head output is
// L2-normalized; the others are raw linear maps.
template <typename T>
ad::Var<T> apply_head(ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> pre_logits, Head head);

// Mean over the frame axis: (S*L, D) video/shot-major rows -> (S, D).
template <typename T>
ad::Var<T> pool_shot(ad::Var<T> frame_embeddings, int64_t frames_per_shot);
// Array variant for a single shot (L, D) -> (D).
template <typename T>
ad::Array<T> pool_shot(const ad::Array<T>& frame_embeddings);

// Pair scorer: scores[i][j] = phi1(e_i) . phi2(e'_j). e, e' are (R,D') /(C,D').
template <typename T>
ad::Var<T> pair_score_matrix(ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> e,
                             ad::Var<T> e_prime);
template <typename T>
T score_pair(ModelBundle<T>& m, const ad::Array<T>& e, const ad::Array<T>& e_prime);

// Recurrent predictor over video-major shot embeddings (V*K, D'):
// returns one (V, D') prediction per step 2..K, where prediction k depends
// only on shots 1..k-1 of each video.
template <typename T>
std::vector<ad::Var<T>> predict_sequence(ModelBundle<T>& m, ad::Graph<T>& g,
                                         ad::Var<T> shot_embeddings, int64_t videos,
                                         int64_t k_shots);

// Order predictor logit per video from concatenated (presented-order) shot
// embeddings: (V*K, D') video-major rows -> (V) logits.
template <typename T>
ad::Var<T> order_logit(ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> shot_embeddings,
                       int64_t videos, int64_t k_shots);

}  // namespace vivi::model
