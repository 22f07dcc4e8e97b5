#include "psumml/label_algebra.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace psumml {

LabelSet LabelSet::from(std::vector<int> classes) {
  std::sort(classes.begin(), classes.end());
  if (std::adjacent_find(classes.begin(), classes.end()) != classes.end())
    throw std::invalid_argument("LabelSet: duplicate class id");
  if (!classes.empty() && classes.front() < 0)
    throw std::invalid_argument("LabelSet: negative class id");
  if (classes.empty() || classes.front() != kBackgroundClass)
    throw std::invalid_argument("LabelSet: background id 0 must be a member");
  LabelSet ls;
  ls.classes_ = std::move(classes);
  return ls;
}

bool LabelSet::contains(int cls) const {
  return std::binary_search(classes_.begin(), classes_.end(), cls);
}

std::vector<int> LabelSet::organs() const {
  return {classes_.begin() + 1, classes_.end()};
}

bool LabelSet::is_subset_of(const LabelSet& other) const {
  return std::includes(other.classes_.begin(), other.classes_.end(), classes_.begin(),
                       classes_.end());
}

ChannelLayout ChannelLayout::for_label_set(const LabelSet& ls) {
  return ChannelLayout{ls.classes()};
}

int ChannelLayout::index_of(int cls) const {
  for (std::size_t i = 0; i < channel_to_class.size(); ++i)
    if (channel_to_class[i] == cls) return static_cast<int>(i);
  return -1;
}

LabelSet full_label_set(const LabelSet& la, const LabelSet& lb) {
  std::set<int> all(la.classes().begin(), la.classes().end());
  all.insert(lb.classes().begin(), lb.classes().end());
  return LabelSet::from({all.begin(), all.end()});
}

std::vector<int> complement(const LabelSet& global, const LabelSet& lm) {
  if (!lm.is_subset_of(global))
    throw std::invalid_argument("complement: modality label set is not a subset of the global set");
  std::vector<int> out;
  for (int cls : global.classes())
    if (cls != kBackgroundClass && !lm.contains(cls)) out.push_back(cls);
  return out;
}

ScenarioKind classify_scenario(const LabelSet& la, const LabelSet& lb) {
  if (la == lb)
    throw std::invalid_argument("classify_scenario: identical label sets are not a PSUMML task");
  const std::vector<int> oa = la.organs();
  const std::vector<int> ob = lb.organs();
  std::vector<int> inter;
  std::set_intersection(oa.begin(), oa.end(), ob.begin(), ob.end(), std::back_inserter(inter));
  if (inter.empty()) return ScenarioKind::Disjoint;
  const bool a_in_b = std::includes(ob.begin(), ob.end(), oa.begin(), oa.end());
  const bool b_in_a = std::includes(oa.begin(), oa.end(), ob.begin(), ob.end());
  if (a_in_b || b_in_a) return ScenarioKind::Superset;
  return ScenarioKind::Overlapping;
}

ScenarioSpec ScenarioSpec::make(const LabelSet& la, const LabelSet& lb) {
  ScenarioSpec s;
  s.global = full_label_set(la, lb);
  s.modality_a = la;
  s.modality_b = lb;
  std::vector<int> ca = complement(s.global, la);
  std::vector<int> cb = complement(s.global, lb);
  ca.insert(ca.begin(), kBackgroundClass);
  cb.insert(cb.begin(), kBackgroundClass);
  s.complement_a = LabelSet::from(ca);
  s.complement_b = LabelSet::from(cb);
  s.kind = classify_scenario(la, lb);
  return s;
}

namespace detail {

MergePlan build_merge_plan(const ChannelLayout& in_layout, const std::vector<int>& merge_set,
                           const LabelSet& global) {
  for (int cls : merge_set)
    if (!global.contains(cls))
      throw std::invalid_argument("merge_probs: merge set contains a class outside the label set");

  auto merged = [&](int cls) {
    return cls != kBackgroundClass &&
           std::find(merge_set.begin(), merge_set.end(), cls) != merge_set.end();
  };

  MergePlan plan;
  plan.layout.channel_to_class.push_back(kBackgroundClass);
  for (int ch = 0; ch < in_layout.channels(); ++ch) {
    const int cls = in_layout.channel_to_class[ch];
    if (cls != kBackgroundClass && !merged(cls)) plan.layout.channel_to_class.push_back(cls);
  }

  plan.sources.resize(plan.layout.channel_to_class.size());
  // Background absorbs itself plus the merge set, ascending class id.
  for (int ch = 0; ch < in_layout.channels(); ++ch) {
    const int cls = in_layout.channel_to_class[ch];
    if (cls == kBackgroundClass || merged(cls))
      plan.sources[0].push_back(ch);
    else
      plan.sources[plan.layout.index_of(cls)].push_back(ch);
  }
  return plan;
}

}  // namespace detail

template <class T>
MergedProbs<T> merge_probs(const Tensor<T>& probs, const ChannelLayout& in_layout,
                           const std::vector<int>& merge_set, const LabelSet& global) {
  if (probs.c != in_layout.channels())
    throw std::invalid_argument("merge_probs: channel count does not match layout");
  detail::MergePlan plan = detail::build_merge_plan(in_layout, merge_set, global);

  MergedProbs<T> out;
  out.layout = plan.layout;
  out.probs = Tensor<T>(probs.n, plan.layout.channels(), probs.h, probs.w);
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  for (int i = 0; i < probs.n; ++i) {
    for (std::size_t oc = 0; oc < plan.sources.size(); ++oc) {
      T* dst = out.probs.plane(i, static_cast<int>(oc));
      bool first = true;
      for (int src : plan.sources[oc]) {
        const T* sp = probs.plane(i, src);
        if (first) {
          std::copy(sp, sp + plane, dst);
          first = false;
        } else {
          for (std::size_t q = 0; q < plane; ++q) dst[q] += sp[q];
        }
      }
    }
  }
  return out;
}

template <class T>
void merge_probs_backward(const Tensor<T>& dmerged, const ChannelLayout& in_layout,
                          const std::vector<int>& merge_set, const LabelSet& global,
                          Tensor<T>& dprobs) {
  detail::MergePlan plan = detail::build_merge_plan(in_layout, merge_set, global);
  if (dmerged.c != plan.layout.channels())
    throw std::invalid_argument("merge_probs_backward: gradient channel count mismatch");
  const std::size_t plane = static_cast<std::size_t>(dmerged.h) * dmerged.w;
  for (int i = 0; i < dmerged.n; ++i) {
    for (std::size_t oc = 0; oc < plan.sources.size(); ++oc) {
      const T* gp = dmerged.plane(i, static_cast<int>(oc));
      for (int src : plan.sources[oc]) {
        T* dp = dprobs.plane(i, src);
        for (std::size_t q = 0; q < plane; ++q) dp[q] += gp[q];
      }
    }
  }
}

template MergedProbs<float> merge_probs(const Tensor<float>&, const ChannelLayout&,
                                        const std::vector<int>&, const LabelSet&);
template MergedProbs<double> merge_probs(const Tensor<double>&, const ChannelLayout&,
                                         const std::vector<int>&, const LabelSet&);
template void merge_probs_backward(const Tensor<float>&, const ChannelLayout&,
                                   const std::vector<int>&, const LabelSet&, Tensor<float>&);
template void merge_probs_backward(const Tensor<double>&, const ChannelLayout&,
                                   const std::vector<int>&, const LabelSet&, Tensor<double>&);

namespace {

std::uint8_t partialize_value(std::uint8_t v, const LabelSet& lm, const LabelSet& global) {
  if (!global.contains(v))
    throw std::invalid_argument("partialize_mask: class id outside the global label set");
  return lm.contains(v) ? v : static_cast<std::uint8_t>(kBackgroundClass);
}

}  // namespace

Mask partialize_mask(const Mask& mask, const LabelSet& lm, const LabelSet& global) {
  Mask out(mask.h, mask.w);
  for (std::size_t q = 0; q < mask.v.size(); ++q)
    out.v[q] = partialize_value(mask.v[q], lm, global);
  return out;
}

MaskBatch partialize_mask(const MaskBatch& masks, const LabelSet& lm, const LabelSet& global) {
  MaskBatch out(masks.n, masks.h, masks.w);
  for (std::size_t q = 0; q < masks.v.size(); ++q)
    out.v[q] = partialize_value(masks.v[q], lm, global);
  return out;
}

namespace {

std::uint8_t local_index_value(std::uint8_t v, const ChannelLayout& layout) {
  const int idx = layout.index_of(v);
  if (idx < 0) throw std::invalid_argument("local_index: class id has no channel in layout");
  return static_cast<std::uint8_t>(idx);
}

}  // namespace

Mask local_index(const Mask& mask, const ChannelLayout& layout) {
  Mask out(mask.h, mask.w);
  for (std::size_t q = 0; q < mask.v.size(); ++q) out.v[q] = local_index_value(mask.v[q], layout);
  return out;
}

MaskBatch local_index(const MaskBatch& masks, const ChannelLayout& layout) {
  MaskBatch out(masks.n, masks.h, masks.w);
  for (std::size_t q = 0; q < masks.v.size(); ++q) out.v[q] = local_index_value(masks.v[q], layout);
  return out;
}

std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::Disjoint:
      return "disjoint";
    case ScenarioKind::Overlapping:
      return "overlapping";
    case ScenarioKind::Superset:
      return "superset";
  }
  return "unknown";
}

}  // namespace psumml
