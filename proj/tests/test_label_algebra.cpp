#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "psumml/label_algebra.hpp"
#include "psumml/rng.hpp"

#include "test_util.hpp"

using namespace psumml;

namespace {

// Scalar per-pixel loop oracle for the merge operator, written against the
// definition only: output background = background + merged classes (ascending
// id), kept classes copied in ascending order.
template <class T>
Tensor<T> merge_oracle(const Tensor<T>& probs, const std::vector<int>& classes,
                       const std::vector<int>& merge_set) {
  std::vector<int> kept{0};
  for (int cls : classes)
    if (cls != 0 && std::find(merge_set.begin(), merge_set.end(), cls) == merge_set.end())
      kept.push_back(cls);
  Tensor<T> out(probs.n, static_cast<int>(kept.size()), probs.h, probs.w);
  for (int i = 0; i < probs.n; ++i) {
    for (int y = 0; y < probs.h; ++y) {
      for (int x = 0; x < probs.w; ++x) {
        T bg = T(0);
        for (std::size_t ch = 0; ch < classes.size(); ++ch) {
          const int cls = classes[ch];
          const bool merged =
              cls != 0 && std::find(merge_set.begin(), merge_set.end(), cls) != merge_set.end();
          if (cls == 0 || merged) bg += probs.at(i, static_cast<int>(ch), y, x);
        }
        out.at(i, 0, y, x) = bg;
        for (std::size_t kc = 1; kc < kept.size(); ++kc) {
          const auto src = std::find(classes.begin(), classes.end(), kept[kc]) - classes.begin();
          out.at(i, static_cast<int>(kc), y, x) = probs.at(i, static_cast<int>(src), y, x);
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("LabelSet validation") {
  CHECK_THROWS_AS(LabelSet::from({1, 2}), std::invalid_argument);      // no background
  CHECK_THROWS_AS(LabelSet::from({0, 2, 2}), std::invalid_argument);   // duplicate
  CHECK_THROWS_AS(LabelSet::from({0, -1, 2}), std::invalid_argument);  // negative
  const LabelSet ls = LabelSet::from({3, 0, 1});
  CHECK(ls.classes() == std::vector<int>{0, 1, 3});
  CHECK(ls.organs() == std::vector<int>{1, 3});
}

TEST_CASE("full_label_set") {
  CHECK(full_label_set(LabelSet::from({0, 1, 3}), LabelSet::from({0, 2, 4})).classes() ==
        std::vector<int>{0, 1, 2, 3, 4});
  CHECK(full_label_set(LabelSet::from({0, 1}), LabelSet::from({0, 1})).classes() ==
        std::vector<int>{0, 1});
  CHECK(full_label_set(LabelSet::from({0}), LabelSet::from({0, 5})).classes() ==
        std::vector<int>{0, 5});
}

TEST_CASE("complement") {
  const LabelSet global = LabelSet::from({0, 1, 2, 3, 4});
  CHECK(complement(global, LabelSet::from({0, 1, 3})) == std::vector<int>{2, 4});
  CHECK(complement(global, global).empty());
  CHECK(complement(global, LabelSet::from({0})) == std::vector<int>{1, 2, 3, 4});
  CHECK_THROWS_AS(complement(LabelSet::from({0, 1}), LabelSet::from({0, 2})),
                  std::invalid_argument);
}

TEST_CASE("classify_scenario") {
  CHECK(classify_scenario(LabelSet::from({0, 1, 3}), LabelSet::from({0, 2, 4})) ==
        ScenarioKind::Disjoint);
  CHECK(classify_scenario(LabelSet::from({0, 1, 2, 3}), LabelSet::from({0, 2, 3, 4})) ==
        ScenarioKind::Overlapping);
  CHECK(classify_scenario(LabelSet::from({0, 1, 2, 3, 4}), LabelSet::from({0, 2, 4})) ==
        ScenarioKind::Superset);
  CHECK_THROWS_AS(classify_scenario(LabelSet::from({0, 1}), LabelSet::from({0, 1})),
                  std::invalid_argument);

  // Total and deterministic on random valid pairs.
  rng::Stream rs(7);
  for (int t = 0; t < 200; ++t) {
    std::vector<int> a{0}, b{0};
    for (int c = 1; c <= 5; ++c) {
      if (rs.uniform01() < 0.5) a.push_back(c);
      if (rs.uniform01() < 0.5) b.push_back(c);
    }
    const LabelSet la = LabelSet::from(a), lb = LabelSet::from(b);
    if (la == lb) continue;
    const ScenarioKind k1 = classify_scenario(la, lb);
    const ScenarioKind k2 = classify_scenario(la, lb);
    CHECK(k1 == k2);
  }
}

TEST_CASE("ScenarioSpec bookkeeping") {
  const ScenarioSpec sc = ScenarioSpec::make(LabelSet::from({0, 1, 3}), LabelSet::from({0, 2, 4}));
  CHECK(sc.global.classes() == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(sc.complement_organs(0) == std::vector<int>{2, 4});
  CHECK(sc.complement_organs(1) == std::vector<int>{1, 3});
  CHECK(sc.complement_a.contains(0));
  CHECK(sc.kind == ScenarioKind::Disjoint);
  CHECK_FALSE(sc.complement_empty(0));

  const ScenarioSpec s3 =
      ScenarioSpec::make(LabelSet::from({0, 1, 2, 3, 4}), LabelSet::from({0, 2, 4}));
  CHECK(s3.kind == ScenarioKind::Superset);
  CHECK(s3.complement_empty(0));
  CHECK(s3.complement_organs(1) == std::vector<int>{1, 3});
}

TEST_CASE("merge_probs: worked examples") {
  const LabelSet global = LabelSet::from({0, 1, 2, 3, 4});
  const ChannelLayout layout = ChannelLayout::for_label_set(global);
  Tensor<double> p(1, 5, 1, 1);
  const double vals[5] = {0.1, 0.2, 0.3, 0.2, 0.2};
  for (int c = 0; c < 5; ++c) p.at(0, c, 0, 0) = vals[c];

  SUBCASE("fold {3,4}") {
    const auto m = merge_probs(p, layout, {3, 4}, global);
    CHECK(m.layout.channel_to_class == std::vector<int>{0, 1, 2});
    CHECK(m.probs.at(0, 0, 0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(m.probs.at(0, 1, 0, 0) == 0.2);
    CHECK(m.probs.at(0, 2, 0, 0) == 0.3);
  }
  SUBCASE("empty merge set is the identity") {
    const auto m = merge_probs(p, layout, {}, global);
    CHECK(m.layout.channel_to_class == layout.channel_to_class);
    CHECK(test_util::bit_equal(m.probs, p));
  }
  SUBCASE("one-hot mass relocation") {
    Tensor<double> oh(1, 5, 1, 1);
    oh.at(0, 3, 0, 0) = 1.0;
    const auto m = merge_probs(oh, layout, {3}, global);
    CHECK(m.probs.at(0, 0, 0, 0) == 1.0);
    for (int c = 1; c < m.probs.c; ++c) CHECK(m.probs.at(0, c, 0, 0) == 0.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(merge_probs(p, layout, {9}, global), std::invalid_argument);
    Tensor<double> wrong(1, 4, 1, 1);
    CHECK_THROWS_AS(merge_probs(wrong, layout, {3}, global), std::invalid_argument);
  }
  SUBCASE("output widths match both uses") {
    // Folding the complement keeps the labeled classes; folding the labeled
    // organs keeps the complement.
    const auto keep_labeled = merge_probs(p, layout, {2, 4}, global);
    CHECK(keep_labeled.probs.c == 3);  // M^a + 1 with L^a = {0,1,3}
    const auto keep_partial = merge_probs(p, layout, {1, 3}, global);
    CHECK(keep_partial.probs.c == 3);  // M - M^a
  }
}

TEST_CASE("merge_probs equals the scalar loop oracle exactly") {
  rng::Stream rs(99);
  for (int m_classes : {3, 5, 8}) {
    std::vector<int> classes{0};
    for (int c = 1; c < m_classes; ++c) classes.push_back(c * 2);  // non-contiguous ids
    const LabelSet global = LabelSet::from(classes);
    const ChannelLayout layout = ChannelLayout::for_label_set(global);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor<double> p(2, m_classes, 4, 4);
      test_util::fill_simplex(p, rs);
      std::vector<int> merge_set;
      for (int cls : global.organs())
        if (rs.uniform01() < 0.5) merge_set.push_back(cls);
      const auto got = merge_probs(p, layout, merge_set, global);
      const auto want = merge_oracle(p, classes, merge_set);
      REQUIRE(got.probs.size() == want.size());
      CHECK(test_util::bit_equal(got.probs, want));
    }
  }
}

TEST_CASE("merge_probs properties: mass conservation and composition") {
  const LabelSet global = LabelSet::from({0, 1, 2, 3, 4, 5});
  const ChannelLayout layout = ChannelLayout::for_label_set(global);
  rng::Stream rs(123);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor<double> p(1, 6, 4, 4);
    test_util::fill_simplex(p, rs);
    const auto merged = merge_probs(p, layout, {2, 5}, global);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        double s1 = 0, s2 = 0;
        for (int c = 0; c < p.c; ++c) s1 += p.at(0, c, y, x);
        for (int c = 0; c < merged.probs.c; ++c) s2 += merged.probs.at(0, c, y, x);
        CHECK(std::abs(s1 - s2) < 1e-12);
      }

    const auto two_step =
        merge_probs(merge_probs(p, layout, {2}, global).probs,
                    merge_probs(p, layout, {2}, global).layout, {5}, global);
    const auto one_step = merge_probs(p, layout, {2, 5}, global);
    CHECK(two_step.layout.channel_to_class == one_step.layout.channel_to_class);
    CHECK(test_util::max_abs_diff(two_step.probs, one_step.probs) < 1e-15);
  }
}

TEST_CASE("partialize_mask") {
  const LabelSet global = LabelSet::from({0, 1, 2, 3, 4});
  const LabelSet lm = LabelSet::from({0, 1, 3});
  Mask m(1, 3);
  m.at(0, 0) = 4;
  m.at(0, 1) = 3;
  m.at(0, 2) = 0;
  const Mask pm = partialize_mask(m, lm, global);
  CHECK(pm.at(0, 0) == 0);  // unlabeled class forced to background
  CHECK(pm.at(0, 1) == 3);  // labeled class kept
  CHECK(pm.at(0, 2) == 0);

  // Idempotence and identity under the full set.
  CHECK(partialize_mask(pm, lm, global).v == pm.v);
  CHECK(partialize_mask(m, global, global).v == m.v);

  Mask bad(1, 1);
  bad.at(0, 0) = 9;
  CHECK_THROWS_AS(partialize_mask(bad, lm, global), std::invalid_argument);
}

TEST_CASE("local_index") {
  ChannelLayout layout{{0, 1, 3}};
  Mask m(1, 2);
  m.at(0, 0) = 3;
  m.at(0, 1) = 0;
  const Mask li = local_index(m, layout);
  CHECK(li.at(0, 0) == 2);
  CHECK(li.at(0, 1) == 0);

  // Round trip over every layout member.
  for (int ch = 0; ch < layout.channels(); ++ch) {
    Mask one(1, 1);
    one.at(0, 0) = static_cast<std::uint8_t>(layout.channel_to_class[ch]);
    CHECK(layout.channel_to_class[local_index(one, layout).at(0, 0)] ==
          layout.channel_to_class[ch]);
  }

  Mask bad(1, 1);
  bad.at(0, 0) = 2;
  CHECK_THROWS_AS(local_index(bad, layout), std::invalid_argument);
}
