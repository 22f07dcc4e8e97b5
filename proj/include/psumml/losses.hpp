#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "psumml/errors.hpp"
#include "psumml/label_algebra.hpp"
#include "psumml/selftrain.hpp"
#include "psumml/tensor.hpp"

// Training losses. Conventions shared by every function here:
//   - values are means over contributing pixels, so they are resolution
//     independent; a loss over zero pixels is 0 by definition;
//   - gradient outputs ACCUMULATE (+=) into the caller's buffer, so terms
//     compose by passing the same buffer;
//   - targets never receive gradients (adversarial targets are constants).
namespace psumml {

struct LossValue {
  double value = 0.0;
  long long pixel_count = 0;
};

inline constexpr double kLogClamp = 1e-8;   // floor under log()
inline constexpr double kDiceSmooth = 1e-5; // dice smoothing

struct LossWeights {
  double lambda_dpca = 0.01;
  bool sest_enabled = false;
};

// -- cross entropy with hard per-pixel channel indices ----------------------
// contribute: optional per-pixel mask (same n*h*w layout); pixels with 0 are
// skipped entirely.
template <class T>
LossValue cross_entropy(const MaskBatch& target_idx, const Tensor<T>& pred,
                        Tensor<T>* dpred = nullptr,
                        const std::vector<std::uint8_t>* contribute = nullptr) {
  if (target_idx.n != pred.n || target_idx.h != pred.h || target_idx.w != pred.w)
    throw std::invalid_argument("cross_entropy: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(pred.h) * pred.w;
  long long npix = 0;
  if (contribute) {
    for (std::uint8_t f : *contribute) npix += (f != 0);
  } else {
    npix = static_cast<long long>(pred.n) * static_cast<long long>(plane);
  }
  if (npix == 0) return {0.0, 0};

  double sum = 0.0;
  const double inv = 1.0 / static_cast<double>(npix);
  for (int i = 0; i < pred.n; ++i) {
    for (std::size_t q = 0; q < plane; ++q) {
      if (contribute && !(*contribute)[static_cast<std::size_t>(i) * plane + q]) continue;
      const int t = target_idx.v[static_cast<std::size_t>(i) * plane + q];
      if (t >= pred.c) throw std::invalid_argument("cross_entropy: target index out of range");
      const T* base = pred.data() + static_cast<std::size_t>(i) * pred.c * plane + q;
      const double p = static_cast<double>(base[static_cast<std::size_t>(t) * plane]);
      const double pc = std::min(std::max(p, kLogClamp), 1.0);
      sum += -std::log(pc);
      if (dpred && p > kLogClamp && p < 1.0) {
        dpred->v[(static_cast<std::size_t>(i) * pred.c + t) * plane + q] +=
            static_cast<T>(-inv / pc);
      }
    }
  }
  return {sum * inv, npix};
}

// -- cross entropy with per-pixel soft targets -------------------------------
template <class T>
LossValue cross_entropy_soft(const Tensor<T>& target, const Tensor<T>& pred,
                             Tensor<T>* dpred = nullptr) {
  if (!target.same_shape(pred)) throw std::invalid_argument("cross_entropy_soft: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(pred.h) * pred.w;
  const long long npix = static_cast<long long>(pred.n) * static_cast<long long>(plane);
  if (npix == 0) return {0.0, 0};
  const double inv = 1.0 / static_cast<double>(npix);
  double sum = 0.0;
  for (std::size_t q = 0; q < pred.size(); ++q) {
    const double t = static_cast<double>(target.v[q]);
    if (t == 0.0) continue;
    const double p = static_cast<double>(pred.v[q]);
    const double pc = std::min(std::max(p, kLogClamp), 1.0);
    sum += -t * std::log(pc);
    if (dpred && p > kLogClamp && p < 1.0) dpred->v[q] += static_cast<T>(-t * inv / pc);
  }
  return {sum * inv, npix};
}

// -- dice loss ---------------------------------------------------------------
// mean over channels of 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps),
// sums running over every pixel of the batch; g is the one-hot of target_idx.
template <class T>
LossValue dice_loss(const MaskBatch& target_idx, const Tensor<T>& pred,
                    Tensor<T>* dpred = nullptr) {
  if (target_idx.n != pred.n || target_idx.h != pred.h || target_idx.w != pred.w)
    throw std::invalid_argument("dice_loss: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(pred.h) * pred.w;
  const long long npix = static_cast<long long>(pred.n) * static_cast<long long>(plane);
  if (npix == 0) return {0.0, 0};

  double total = 0.0;
  for (int ch = 0; ch < pred.c; ++ch) {
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int i = 0; i < pred.n; ++i) {
      const T* pp = pred.plane(i, ch);
      const std::uint8_t* tp = target_idx.plane(i);
      for (std::size_t q = 0; q < plane; ++q) {
        const double p = static_cast<double>(pp[q]);
        const double g = (tp[q] == ch) ? 1.0 : 0.0;
        inter += p * g;
        psum += p;
        gsum += g;
      }
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = psum + gsum + kDiceSmooth;
    total += 1.0 - num / den;
    if (dpred) {
      const double inv_c = 1.0 / static_cast<double>(pred.c);
      const double den2 = den * den;
      for (int i = 0; i < pred.n; ++i) {
        const std::uint8_t* tp = target_idx.plane(i);
        T* dp = dpred->plane(i, ch);
        for (std::size_t q = 0; q < plane; ++q) {
          const double g = (tp[q] == ch) ? 1.0 : 0.0;
          dp[q] += static_cast<T>(-(2.0 * g * den - num) / den2 * inv_c);
        }
      }
    }
  }
  return {total / static_cast<double>(pred.c), npix};
}

// -- partial class learning (marginal CE + dice on merged channels) ----------
// probs is the full-set prediction; the modality's unlabeled classes are
// folded into background before both terms. Returns one modality's term; the
// caller sums modality a and b.
template <class T>
LossValue pcl_loss(const Tensor<T>& probs, const MaskBatch& partial_mask,
                   const ScenarioSpec& scenario, int modality, Tensor<T>* dprobs = nullptr) {
  const LabelSet& lm = scenario.modality(modality);
  for (std::uint8_t v : partial_mask.v)
    if (!lm.contains(v))
      throw std::invalid_argument("pcl_loss: mask contains a class outside the modality label set");

  const ChannelLayout full = ChannelLayout::for_label_set(scenario.global);
  const std::vector<int> merge_set = scenario.complement_organs(modality);
  MergedProbs<T> merged = merge_probs(probs, full, merge_set, scenario.global);
  const MaskBatch targets = local_index(partial_mask, merged.layout);

  Tensor<T> dmerged;
  Tensor<T>* dm = nullptr;
  if (dprobs) {
    dmerged = Tensor<T>(merged.probs.n, merged.probs.c, merged.probs.h, merged.probs.w);
    dm = &dmerged;
  }
  const LossValue ce = cross_entropy(targets, merged.probs, dm);
  const LossValue dc = dice_loss(targets, merged.probs, dm);
  if (dprobs) merge_probs_backward(dmerged, full, merge_set, scenario.global, *dprobs);
  return {ce.value + dc.value, ce.pixel_count};
}

// -- decomposed partial class adaptation -------------------------------------

// Builds the class-conditional domain target for discriminator `guard`:
// the guard's labeled organs are folded into background, and the merged block
// lands in the first half for cross-modality samples (source != guard) or the
// second half for guard-modality samples. The other half stays zero. The
// result is a constant: no gradient flows through target construction.
template <class T>
Tensor<T> dpca_disc_targets(const Tensor<T>& probs, int guard, int source,
                            const ScenarioSpec& scenario) {
  if (scenario.complement_empty(guard))
    throw std::invalid_argument("dpca_disc_targets: guard modality has an empty complement");
  const ChannelLayout full = ChannelLayout::for_label_set(scenario.global);
  const std::vector<int> merge_set = scenario.modality(guard).organs();
  MergedProbs<T> merged = merge_probs(probs, full, merge_set, scenario.global);
  const int half = merged.probs.c;
  Tensor<T> target(probs.n, 2 * half, probs.h, probs.w);
  const int offset = (source == guard) ? half : 0;
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  for (int i = 0; i < probs.n; ++i)
    for (int ch = 0; ch < half; ++ch)
      std::copy(merged.probs.plane(i, ch), merged.probs.plane(i, ch) + plane,
                target.plane(i, offset + ch));
  return target;
}

// Eq-2 style loss for one discriminator: CE against the domain-stacked
// targets for the cross-modality batch plus the guard-modality batch.
// Exactly zero (and a no-op) when the guard has nothing to adapt.
template <class T>
LossValue dpca_discriminator_loss(const ScenarioSpec& scenario, int guard,
                                  const Tensor<T>* d_out_other, const Tensor<T>* target_other,
                                  const Tensor<T>* d_out_guard, const Tensor<T>* target_guard,
                                  Tensor<T>* dd_other = nullptr, Tensor<T>* dd_guard = nullptr) {
  if (scenario.complement_empty(guard)) return {0.0, 0};
  const LossValue lo = cross_entropy_soft(*target_other, *d_out_other, dd_other);
  const LossValue lg = cross_entropy_soft(*target_guard, *d_out_guard, dd_guard);
  return {lo.value + lg.value, lo.pixel_count + lg.pixel_count};
}

// Eq-3 style loss for the feature encoder: the guard-modality batch is pushed
// toward the cross-modality half of the discriminator's output. The caller
// backpropagates dd through a frozen discriminator into the features.
template <class T>
LossValue dpca_encoder_loss(const ScenarioSpec& scenario, int guard, const Tensor<T>* d_out_guard,
                            const Tensor<T>* flipped_target, Tensor<T>* dd = nullptr) {
  if (scenario.complement_empty(guard)) return {0.0, 0};
  return cross_entropy_soft(*flipped_target, *d_out_guard, dd);
}

// -- snapshot ensembled self-training -----------------------------------------
// Mean CE over pseudo-labeled pixels against the full-set prediction.
template <class T>
LossValue sest_loss(const Tensor<T>& probs, const PseudoLabelBatch& pseudo,
                    const ScenarioSpec& scenario, int modality, Tensor<T>* dprobs = nullptr) {
  if (pseudo.labels.n != probs.n || pseudo.labels.h != probs.h || pseudo.labels.w != probs.w)
    throw std::invalid_argument("sest_loss: shape mismatch");
  const LabelSet& allowed = (modality == kModalityA) ? scenario.complement_a
                                                     : scenario.complement_b;
  for (std::size_t q = 0; q < pseudo.assigned.size(); ++q)
    if (pseudo.assigned[q] && !allowed.contains(pseudo.labels.v[q]))
      throw std::invalid_argument("sest_loss: pseudo label outside the allowed class set");

  const ChannelLayout full = ChannelLayout::for_label_set(scenario.global);
  const MaskBatch targets = local_index(pseudo.labels, full);
  return cross_entropy(targets, probs, dprobs, &pseudo.assigned);
}

// -- Eq-6 combination ---------------------------------------------------------
struct LossParts {
  LossValue pcl;
  LossValue dpca_enc_a;
  LossValue dpca_enc_b;
  LossValue sest;
};

inline LossValue total_loss(const LossParts& parts, const LossWeights& weights) {
  auto check = [](const LossValue& lv, const char* name) {
    if (!std::isfinite(lv.value))
      throw TrainingError(std::string("total_loss: non-finite part ") + name);
  };
  check(parts.pcl, "pcl");
  check(parts.dpca_enc_a, "dpca_a");
  check(parts.dpca_enc_b, "dpca_b");
  check(parts.sest, "sest");
  double total = parts.pcl.value +
                 weights.lambda_dpca * (parts.dpca_enc_a.value + parts.dpca_enc_b.value);
  long long pix = parts.pcl.pixel_count + parts.dpca_enc_a.pixel_count +
                  parts.dpca_enc_b.pixel_count;
  if (weights.sest_enabled) {
    total += parts.sest.value;
    pix += parts.sest.pixel_count;
  }
  return {total, pix};
}

}  // namespace psumml
