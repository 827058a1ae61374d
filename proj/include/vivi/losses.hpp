#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "vivi/graph.hpp"
#include "vivi/model.hpp"

namespace vivi::loss {

struct LossWeights {
  double lambda = 0.0;  // video-level weight
  double gamma = 0.0;   // supervised weight
  double margin = 0.5;  // triplet margin
  bool frame_enabled = true;
  bool video_enabled = false;
  bool supervised_enabled = false;

  void validate(bool frame_loss_is_triplet) const;
};

// Semi-hard triplet selection over a BxB squared-distance matrix.
// For each ordered anchor-positive pair: pick the hardest negative inside
// the band (d_ap, d_ap + margin); if the band is empty, fall back to the
// hardest negative outside it. Ties resolve to the lowest index.
struct TripletSelection {
  std::vector<int64_t> ap_flat;  // anchor*B + positive
  std::vector<int64_t> an_flat;  // anchor*B + negative
};

template <typename T>
TripletSelection mine_semihard(const std::vector<T>& dist, const std::vector<int>& classes,
                               int64_t batch, T margin);

// Mean over anchor-positive pairs of max(0, d(a,p) - d(a,n) + margin) with
// semi-hard mining. The arithmetic path is ISA-independent so results can be
// compared exactly against an enumeration oracle.
template <typename T>
ad::Var<T> triplet_semihard_loss(ad::Var<T> embeddings, const std::vector<int>& classes,
                                 T margin);

// Appends the 3 rotated copies of the batch and classifies the rotation of
// all 4B examples with the rotation head (labels 0..3 by copy block).
// If prelogits_0deg is non-null it receives the unrotated copies' pre-logits.
template <typename T>
ad::Var<T> rotation_loss(model::ModelBundle<T>& m, ad::Graph<T>& g,
                         const ad::Array<T>& frames, bool training,
                         ad::Var<T>* prelogits_0deg = nullptr);

// (4B,H,W,C) array holding the 0/90/180/270-degree copies of a square batch.
template <typename T>
ad::Array<T> make_rotated_copies(const ad::Array<T>& frames);
// Rotate every frame of a square batch by quarter_turns * 90 degrees.
template <typename T>
ad::Array<T> rotate_batch(const ad::Array<T>& frames, int quarter_turns);

// InfoNCE over an NxN score matrix whose diagonal holds the positive pairs:
//   L = -(1/N) sum_i log( exp(s_ii) / ((1/N) sum_j exp(s_ij)) ),
// equal to diagonal-target softmax cross-entropy minus ln N.
template <typename T>
ad::Var<T> infonce_loss(ad::Var<T> scores);

// Generalization for pooled negative sets: row i scores (R x C) with its
// positive at positive_col[i]; mask selects each row's candidate set.
template <typename T>
ad::Var<T> infonce_loss_general(ad::Var<T> scores, const std::vector<int64_t>& positive_col,
                                std::vector<uint8_t> mask);

// Mean sigmoid BCE; label 1 means the shot sequence was presented reversed.
template <typename T>
ad::Var<T> order_prediction_loss(ad::Var<T> logits, const std::vector<int>& labels);

template <typename T>
ad::Var<T> supervised_ce_loss(model::ModelBundle<T>& m, ad::Graph<T>& g,
                              const ad::Array<T>& images, const std::vector<int>& labels,
                              bool training);

// L_S + lambda * L_V (+ gamma * L_SUP)
template <typename T>
ad::Var<T> combine_total(std::optional<ad::Var<T>> l_s, std::optional<ad::Var<T>> l_v,
                         std::optional<ad::Var<T>> l_sup, const LossWeights& w);

// --- batch-level assemblies used by the trainer ---

// Exemplar frame/shot loss over pre-logits: exemplar head + semi-hard triplet.
template <typename T>
ad::Var<T> exemplar_loss(model::ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> pre_logits,
                         const std::vector<int>& classes, T margin);

// Video-level InfoNCE over projected shot embeddings (V*K, D'), video-major.
// With all_steps_negatives, candidates for each prediction are all other
// videos' shot embeddings at every step; otherwise same-step only. The loss
// is averaged over prediction steps.
template <typename T>
ad::Var<T> video_infonce_loss(model::ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> projected,
                              int64_t videos, int64_t k_shots, bool all_steps_negatives);

// Video-level order prediction: per-video shot sequences, reversed where
// flagged, scored by the order predictor.
template <typename T>
ad::Var<T> video_order_loss(model::ModelBundle<T>& m, ad::Graph<T>& g, ad::Var<T> projected,
                            int64_t videos, int64_t k_shots,
                            const std::vector<int>& reversed);

}  // namespace vivi::loss
