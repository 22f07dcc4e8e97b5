#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "psumml/selftrain.hpp"

#include "test_util.hpp"

using namespace psumml;
using kernels::Backend;
using kernels::Workspace;
using test_util::bit_equal;
using test_util::fill_simplex;
using test_util::fill_uniform;

namespace {

const ScenarioSpec kScenario =
    ScenarioSpec::make(LabelSet::from({0, 1, 3}), LabelSet::from({0, 2, 4}));

SegNet<float> tiny_net(std::uint64_t seed) {
  SegNetConfig c;
  c.in_channels = 1;
  c.base_width = 4;
  c.num_classes = 5;
  SegNet<float> net;
  net.configure(c);
  net.init(seed);
  return net;
}

}  // namespace

TEST_CASE("snapshot_times: equal spacing") {
  CHECK(snapshot_times(500, 1000, 4) == std::vector<int>{625, 750, 875, 1000});
  CHECK(snapshot_times(0, 10, 1) == std::vector<int>{10});
  CHECK(snapshot_times(0, 10, 10) == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  CHECK_THROWS_AS(snapshot_times(10, 10, 1), std::invalid_argument);
  CHECK_THROWS_AS(snapshot_times(0, 10, 0), std::invalid_argument);
  CHECK_THROWS_AS(snapshot_times(0, 5, 11), std::invalid_argument);  // cannot increase strictly
}

TEST_CASE("SnapshotStore invariants") {
  SnapshotStore<float> store;
  store.k = 2;
  store.t0 = 10;
  store.tk = 20;
  SegNet<float> net = tiny_net(1);
  CHECK_THROWS_AS(store.add(10, net), std::invalid_argument);  // not inside (t0, tK]
  store.add(15, net);
  CHECK_THROWS_AS(store.add(15, net), std::invalid_argument);  // strictly increasing
  store.add(20, net);
  CHECK(store.full());
  CHECK_THROWS_AS(store.add(21, net), std::invalid_argument);  // at most K
}

TEST_CASE("ensemble_soft_label: identity, exact mean, convexity") {
  Workspace<float> ws;
  Tensor<float> x(1, 1, 16, 16);
  rng::Stream rs(3);
  fill_uniform(x, rs, 0.0, 1.0);

  SUBCASE("store must be full") {
    SnapshotStore<float> store;
    store.k = 2;
    store.t0 = 0;
    store.tk = 10;
    store.add(5, tiny_net(4));
    CHECK_THROWS_AS(ensemble_soft_label(store, x, kModalityA, ws, Backend::OpenMP),
                    std::invalid_argument);
  }

  SUBCASE("K=1 is the snapshot's own output") {
    SnapshotStore<float> store;
    store.k = 1;
    store.t0 = 0;
    store.tk = 10;
    SegNet<float> net = tiny_net(5);
    store.add(10, net);
    SegNet<float>::Cache c;
    net.forward(x, kModalityA, false, c, ws, Backend::OpenMP);
    const Tensor<float> p = ensemble_soft_label(store, x, kModalityA, ws, Backend::OpenMP);
    CHECK(bit_equal(p, c.probs));
  }

  SUBCASE("K identical snapshots reproduce the single output bit for bit") {
    for (int k : {2, 4, 8}) {
      SnapshotStore<float> store;
      store.k = k;
      store.t0 = 0;
      store.tk = 100;
      SegNet<float> net = tiny_net(6);
      for (int i = 1; i <= k; ++i) store.add(i, net);
      SegNet<float>::Cache c;
      net.forward(x, kModalityA, false, c, ws, Backend::OpenMP);
      const Tensor<float> p = ensemble_soft_label(store, x, kModalityA, ws, Backend::OpenMP);
      CHECK(bit_equal(p, c.probs));
    }
  }

  SUBCASE("K=2 is the exact pairwise mean and lies in the per-channel envelope") {
    SnapshotStore<float> store;
    store.k = 2;
    store.t0 = 0;
    store.tk = 10;
    SegNet<float> n1 = tiny_net(7), n2 = tiny_net(8);
    store.add(1, n1);
    store.add(2, n2);
    SegNet<float>::Cache c1, c2;
    n1.forward(x, kModalityA, false, c1, ws, Backend::OpenMP);
    n2.forward(x, kModalityA, false, c2, ws, Backend::OpenMP);
    const Tensor<float> p = ensemble_soft_label(store, x, kModalityA, ws, Backend::OpenMP);
    for (std::size_t q = 0; q < p.size(); ++q) {
      CHECK(p.v[q] == (c1.probs.v[q] + c2.probs.v[q]) / 2.0f);
      CHECK(p.v[q] >= std::min(c1.probs.v[q], c2.probs.v[q]) - 1e-7f);
      CHECK(p.v[q] <= std::max(c1.probs.v[q], c2.probs.v[q]) + 1e-7f);
    }
  }
}

TEST_CASE("modulate: element-wise product without renormalization") {
  Tensor<float> p(1, 2, 1, 1), cur(1, 2, 1, 1);
  p.at(0, 0, 0, 0) = 0.9f;
  p.at(0, 1, 0, 0) = 0.1f;
  cur.at(0, 0, 0, 0) = 0.8f;
  cur.at(0, 1, 0, 0) = 0.2f;
  const Tensor<float> pm = modulate(cur, p);
  CHECK(pm.at(0, 0, 0, 0) == doctest::Approx(0.72f));
  CHECK(pm.at(0, 1, 0, 0) == doctest::Approx(0.02f));
  CHECK(pm.at(0, 0, 0, 0) + pm.at(0, 1, 0, 0) < 1.0f);  // deliberately unnormalized

  // One-hot agreement stays one-hot; uniform x uniform = 1/M^2.
  Tensor<float> oh(1, 3, 1, 1);
  oh.at(0, 1, 0, 0) = 1.0f;
  CHECK(bit_equal(modulate(oh, oh), oh));
  Tensor<float> u(1, 4, 1, 1);
  for (int c = 0; c < 4; ++c) u.at(0, c, 0, 0) = 0.25f;
  const Tensor<float> uu = modulate(u, u);
  for (int c = 0; c < 4; ++c) CHECK(uu.at(0, c, 0, 0) == doctest::Approx(1.0f / 16.0f));

  Tensor<float> bad(1, 3, 2, 2);
  CHECK_THROWS_AS(modulate(bad, p), std::invalid_argument);
}

TEST_CASE("modulation never increases confidence (1000 random pixels, exact)") {
  rng::Stream rs(17);
  Tensor<double> p(1, 5, 25, 40), cur(1, 5, 25, 40);
  fill_simplex(p, rs);
  fill_simplex(cur, rs);
  const Tensor<double> pm = modulate(cur, p);
  const std::size_t plane = 25 * 40;
  for (std::size_t q = 0; q < plane; ++q) {
    double mp = 0, mc = 0, mm = 0;
    for (int c = 0; c < 5; ++c) {
      mp = std::max(mp, p.v[c * plane + q]);
      mc = std::max(mc, cur.v[c * plane + q]);
      mm = std::max(mm, pm.v[c * plane + q]);
    }
    CHECK(mm <= std::min(mp, mc));
  }
}

TEST_CASE("assign_pseudo: candidates, threshold, ties, monotonicity, scale invariance") {
  const ChannelLayout full = ChannelLayout::for_label_set(kScenario.global);

  SUBCASE("worked example: candidate argmax above tau") {
    Tensor<double> pm(1, 5, 1, 1);
    pm.at(0, full.index_of(0), 0, 0) = 0.1;
    pm.at(0, full.index_of(2), 0, 0) = 0.72;  // class 2 in A's complement
    pm.at(0, full.index_of(1), 0, 0) = 0.95;  // labeled class: never a candidate
    MaskBatch partial(1, 1, 1);               // background GT
    const PseudoLabelBatch out = assign_pseudo(pm, partial, kScenario, kModalityA, 0.5);
    CHECK(out.assigned[0] == 1);
    CHECK(out.labels.at(0, 0, 0) == 2);
  }

  SUBCASE("tau = 1 assigns nothing") {
    Tensor<double> pm(1, 5, 2, 2);
    rng::Stream rs(19);
    fill_simplex(pm, rs);
    MaskBatch partial(1, 2, 2);
    CHECK(assign_pseudo(pm, partial, kScenario, kModalityA, 1.0).assigned_count() == 0);
  }

  SUBCASE("pixels with an organ ground truth are never assigned") {
    Tensor<double> pm(1, 5, 1, 2);
    for (int c = 0; c < 5; ++c) pm.at(0, c, 0, 0) = pm.at(0, c, 0, 1) = (c == 2) ? 0.9 : 0.025;
    MaskBatch partial(1, 1, 2);
    partial.at(0, 0, 0) = 1;  // labeled organ
    partial.at(0, 0, 1) = 0;
    const PseudoLabelBatch out = assign_pseudo(pm, partial, kScenario, kModalityA, 0.5);
    CHECK(out.assigned[0] == 0);
    CHECK(out.assigned[1] == 1);
  }

  SUBCASE("ties break toward the lowest class id") {
    Tensor<double> pm(1, 5, 1, 1);
    pm.at(0, full.index_of(2), 0, 0) = 0.8;
    pm.at(0, full.index_of(4), 0, 0) = 0.8;
    MaskBatch partial(1, 1, 1);
    const PseudoLabelBatch out = assign_pseudo(pm, partial, kScenario, kModalityA, 0.5);
    CHECK(out.labels.at(0, 0, 0) == 2);
  }

  SUBCASE("tau monotonicity on 50 random maps") {
    rng::Stream rs(23);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor<double> pm(1, 5, 4, 4);
      fill_simplex(pm, rs);
      MaskBatch partial(1, 4, 4);
      for (auto& v : partial.v) v = (rs.uniform01() < 0.3) ? 1 : 0;
      const double t1 = rs.uniform(0.05, 0.5);
      const double t2 = rs.uniform(t1, 0.99);
      const auto a1 = assign_pseudo(pm, partial, kScenario, kModalityA, t1);
      const auto a2 = assign_pseudo(pm, partial, kScenario, kModalityA, t2);
      for (std::size_t q = 0; q < a1.assigned.size(); ++q) {
        if (a2.assigned[q]) {
          CHECK(a1.assigned[q] == 1);  // assigned set shrinks as tau grows
          CHECK(a1.labels.v[q] == a2.labels.v[q]);
        }
      }
    }
  }

  SUBCASE("argmax is invariant to positive per-pixel rescaling") {
    rng::Stream rs(29);
    Tensor<double> pm(1, 5, 4, 4);
    fill_simplex(pm, rs);
    Tensor<double> scaled = pm;
    const std::size_t plane = 16;
    for (std::size_t q = 0; q < plane; ++q) {
      const double s = rs.uniform(0.2, 0.9);
      for (int c = 0; c < 5; ++c) scaled.v[c * plane + q] *= s;
    }
    MaskBatch partial(1, 4, 4);
    const auto base = assign_pseudo(pm, partial, kScenario, kModalityA, 0.01);
    const auto resc = assign_pseudo(scaled, partial, kScenario, kModalityA, 0.01);
    for (std::size_t q = 0; q < base.assigned.size(); ++q)
      if (base.assigned[q] && resc.assigned[q]) CHECK(base.labels.v[q] == resc.labels.v[q]);
  }

  SUBCASE("preconditions") {
    Tensor<double> pm(1, 5, 1, 1);
    MaskBatch partial(1, 1, 1);
    CHECK_THROWS_AS(assign_pseudo(pm, partial, kScenario, kModalityA, 0.0),
                    std::invalid_argument);
    MaskBatch wrong(1, 2, 2);
    CHECK_THROWS_AS(assign_pseudo(pm, wrong, kScenario, kModalityA, 0.5),
                    std::invalid_argument);
  }
}
