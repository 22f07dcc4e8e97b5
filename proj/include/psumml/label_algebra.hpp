#pragma once

#include <string>
#include <vector>

#include "psumml/tensor.hpp"

// Label-set formalism for partially supervised unpaired multi-modal learning.
// The global class set L is split per modality into a labeled subset L^m and
// its complement (classes annotated as background in that modality). The
// channel-merge operator folds complement probability mass into background,
// turning a full-set prediction into the marginal distribution a partial
// annotation can supervise.
namespace psumml {

constexpr int kBackgroundClass = 0;

// Ordered set of global class ids. Always contains the background id 0.
class LabelSet {
 public:
  LabelSet() : classes_{kBackgroundClass} {}

  // Validates: sorted ascending after normalization, unique, non-negative,
  // background present exactly once. Unsorted input is rejected only for
  // duplicates; order is canonicalized.
  static LabelSet from(std::vector<int> classes);

  const std::vector<int>& classes() const { return classes_; }
  std::size_t size() const { return classes_.size(); }
  bool contains(int cls) const;
  // Non-background members.
  std::vector<int> organs() const;
  std::size_t organ_count() const { return classes_.size() - 1; }
  bool is_subset_of(const LabelSet& other) const;
  bool operator==(const LabelSet& o) const { return classes_ == o.classes_; }

 private:
  std::vector<int> classes_;
};

enum class ScenarioKind { Disjoint = 1, Overlapping = 2, Superset = 3 };

// Maps output channel index -> global class id; background pinned to index 0.
struct ChannelLayout {
  std::vector<int> channel_to_class;

  static ChannelLayout for_label_set(const LabelSet& ls);
  int channels() const { return static_cast<int>(channel_to_class.size()); }
  // -1 when the class has no channel.
  int index_of(int cls) const;
};

// The full PSUMML task description: L, L^a, L^b, the two complements, and
// which of the three learning scenarios the pair falls into. Complement sets
// keep background for bookkeeping; complement_organs_* are the true members.
struct ScenarioSpec {
  LabelSet global;
  LabelSet modality_a;
  LabelSet modality_b;
  LabelSet complement_a;  // L^{a'} ∪ {0}
  LabelSet complement_b;  // L^{b'} ∪ {0}
  ScenarioKind kind = ScenarioKind::Disjoint;

  static ScenarioSpec make(const LabelSet& la, const LabelSet& lb);

  const LabelSet& modality(int m) const { return m == 0 ? modality_a : modality_b; }
  std::vector<int> complement_organs(int m) const {
    return m == 0 ? complement_a.organs() : complement_b.organs();
  }
  bool complement_empty(int m) const { return complement_organs(m).empty(); }
  int num_classes() const { return static_cast<int>(global.size()); }
};

LabelSet full_label_set(const LabelSet& la, const LabelSet& lb);

// L \ lm as raw organ ids (never contains background). Rejects lm ⊄ global.
std::vector<int> complement(const LabelSet& global, const LabelSet& lm);

// Scenario taxonomy over organ classes only; rejects la == lb.
ScenarioKind classify_scenario(const LabelSet& la, const LabelSet& lb);

// Result of folding a class subset into the background channel.
template <class T>
struct MergedProbs {
  Tensor<T> probs;
  ChannelLayout layout;
};

namespace detail {
// Channel plan shared by float/double instantiations: for each output
// channel, the ascending list of input channels folded into it.
struct MergePlan {
  std::vector<std::vector<int>> sources;  // per output channel
  ChannelLayout layout;
};
MergePlan build_merge_plan(const ChannelLayout& in_layout, const std::vector<int>& merge_set,
                           const LabelSet& global);
}  // namespace detail

// Adds the probability mass of `merge_set` classes into channel 0 and keeps
// the remaining classes in ascending-id order. Summation order is fixed
// (ascending class id) so results are reproducible bit for bit.
template <class T>
MergedProbs<T> merge_probs(const Tensor<T>& probs, const ChannelLayout& in_layout,
                           const std::vector<int>& merge_set, const LabelSet& global);

// Adjoint of merge_probs: routes an output-channel gradient back to every
// input channel that was folded into it. Accumulates into dprobs.
template <class T>
void merge_probs_backward(const Tensor<T>& dmerged, const ChannelLayout& in_layout,
                          const std::vector<int>& merge_set, const LabelSet& global,
                          Tensor<T>& dprobs);

// Replaces class ids outside lm by background.
Mask partialize_mask(const Mask& mask, const LabelSet& lm, const LabelSet& global);
MaskBatch partialize_mask(const MaskBatch& masks, const LabelSet& lm, const LabelSet& global);

// Per-pixel channel index of each class id under the layout. Rejects ids
// without a channel.
Mask local_index(const Mask& mask, const ChannelLayout& layout);
MaskBatch local_index(const MaskBatch& masks, const ChannelLayout& layout);

std::string to_string(ScenarioKind kind);

}  // namespace psumml
