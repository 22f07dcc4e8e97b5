#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "psumml/label_algebra.hpp"
#include "psumml/model.hpp"
#include "psumml/tensor.hpp"

// Snapshot scheduling, ensembled soft pseudo-labels, modulation by the
// current model, and thresholded pseudo-label assignment.
namespace psumml {

// Equally spaced capture steps: t_i = t0 + round(i * (tk - t0) / K), i = 1..K.
// Rejects schedules that cannot be strictly increasing.
inline std::vector<int> snapshot_times(int t0, int tk, int k) {
  if (t0 >= tk) throw std::invalid_argument("snapshot_times: t0 must be < tK");
  if (k < 1) throw std::invalid_argument("snapshot_times: K must be >= 1");
  std::vector<int> times;
  times.reserve(k);
  for (int i = 1; i <= k; ++i) {
    const long long t =
        t0 + std::llround(static_cast<double>(i) * (tk - t0) / static_cast<double>(k));
    times.push_back(static_cast<int>(t));
  }
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] <= times[i - 1])
      throw std::invalid_argument("snapshot_times: K too large for the (t0, tK] span");
  return times;
}

template <class T>
struct SnapshotStore {
  int k = 4;
  int t0 = 0, tk = 0;
  std::vector<std::pair<int, SegNet<T>>> snapshots;

  bool full() const { return static_cast<int>(snapshots.size()) == k; }

  void add(int step, const SegNet<T>& net) {
    if (static_cast<int>(snapshots.size()) >= k)
      throw std::invalid_argument("SnapshotStore: already holds K snapshots");
    if (step <= t0 || step > tk)
      throw std::invalid_argument("SnapshotStore: snapshot step outside (t0, tK]");
    if (!snapshots.empty() && step <= snapshots.back().first)
      throw std::invalid_argument("SnapshotStore: snapshot steps must increase");
    snapshots.emplace_back(step, net);
  }
};

// Per-pixel pseudo-label assignment for a batch: labels are global class
// ids, valid only where assigned is set.
struct PseudoLabelBatch {
  MaskBatch labels;
  std::vector<std::uint8_t> assigned;
  double tau = 0.5;

  long long assigned_count() const {
    long long c = 0;
    for (std::uint8_t f : assigned) c += (f != 0);
    return c;
  }
};

namespace detail {
// Pairwise tree sum so that K identical inputs average to exactly their
// common value whenever K is a power of two (the configurations we ship).
template <class T>
Tensor<T> tree_sum(const std::vector<Tensor<T>>& xs, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return xs[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  Tensor<T> a = tree_sum(xs, lo, mid);
  const Tensor<T> b = tree_sum(xs, mid, hi);
  for (std::size_t q = 0; q < a.size(); ++q) a.v[q] += b.v[q];
  return a;
}
}  // namespace detail

// Mean of the K snapshots' eval-mode predictions for one image batch.
template <class T>
Tensor<T> ensemble_soft_label(SnapshotStore<T>& store, const Tensor<T>& images, int modality,
                              kernels::Workspace<T>& ws, kernels::Backend be) {
  if (!store.full())
    throw std::invalid_argument("ensemble_soft_label: snapshot store is not full");
  std::vector<Tensor<T>> preds;
  preds.reserve(store.snapshots.size());
  typename SegNet<T>::Cache cache;
  for (auto& [step, net] : store.snapshots) {
    net.forward(images, modality, /*train=*/false, cache, ws, be);
    preds.push_back(cache.probs);
  }
  Tensor<T> sum = detail::tree_sum(preds, 0, preds.size());
  const T inv = T(1) / static_cast<T>(preds.size());
  for (auto& x : sum.v) x *= inv;
  return sum;
}

// Element-wise product of the current prediction and the ensembled soft
// label. Deliberately not renormalized; `current` is read as a constant.
template <class T>
Tensor<T> modulate(const Tensor<T>& current, const Tensor<T>& p) {
  if (!current.same_shape(p)) throw std::invalid_argument("modulate: shape mismatch");
  Tensor<T> out = p;
  for (std::size_t q = 0; q < out.size(); ++q) out.v[q] *= current.v[q];
  return out;
}

// Thresholded assignment. Candidate pixels are those whose partial ground
// truth is background; candidate classes are the modality's complement plus
// background. The argmax over candidates is assigned iff it exceeds tau
// (strictly); ties break toward the lowest class id.
template <class T>
PseudoLabelBatch assign_pseudo(const Tensor<T>& p_mod, const MaskBatch& partial_mask,
                               const ScenarioSpec& scenario, int modality, double tau) {
  if (tau <= 0.0 || tau > 1.0) throw std::invalid_argument("assign_pseudo: tau must be in (0,1]");
  if (partial_mask.n != p_mod.n || partial_mask.h != p_mod.h || partial_mask.w != p_mod.w)
    throw std::invalid_argument("assign_pseudo: shape mismatch");

  const ChannelLayout full = ChannelLayout::for_label_set(scenario.global);
  std::vector<int> candidates = scenario.complement_organs(modality);
  candidates.insert(candidates.begin(), kBackgroundClass);
  std::vector<int> cand_ch;
  cand_ch.reserve(candidates.size());
  for (int cls : candidates) cand_ch.push_back(full.index_of(cls));

  PseudoLabelBatch out;
  out.tau = tau;
  out.labels = MaskBatch(p_mod.n, p_mod.h, p_mod.w);
  out.assigned.assign(out.labels.size(), 0);

  const std::size_t plane = static_cast<std::size_t>(p_mod.h) * p_mod.w;
  for (int i = 0; i < p_mod.n; ++i) {
    const std::uint8_t* gt = partial_mask.plane(i);
    const T* base = p_mod.data() + static_cast<std::size_t>(i) * p_mod.c * plane;
    for (std::size_t q = 0; q < plane; ++q) {
      if (gt[q] != kBackgroundClass) continue;
      double best = -1.0;
      int best_cls = kBackgroundClass;
      for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
        const double val = static_cast<double>(base[static_cast<std::size_t>(cand_ch[ci]) * plane + q]);
        if (val > best) {
          best = val;
          best_cls = candidates[ci];
        }
      }
      if (best > tau) {
        out.labels.v[static_cast<std::size_t>(i) * plane + q] =
            static_cast<std::uint8_t>(best_cls);
        out.assigned[static_cast<std::size_t>(i) * plane + q] = 1;
      }
    }
  }
  return out;
}

}  // namespace psumml
