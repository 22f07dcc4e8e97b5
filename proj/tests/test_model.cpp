#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "psumml/model.hpp"

#include "test_util.hpp"

using namespace psumml;
using kernels::Backend;
using kernels::Workspace;
using test_util::bit_equal;
using test_util::fill_uniform;

namespace {

SegNetConfig tiny_cfg(int classes = 5) {
  SegNetConfig c;
  c.in_channels = 1;
  c.base_width = 4;
  c.num_classes = classes;
  return c;
}

template <class T>
Tensor<T> random_image(int n, int h, int w, std::uint64_t seed) {
  Tensor<T> x(n, 1, h, w);
  rng::Stream rs(seed);
  fill_uniform(x, rs, 0.0, 1.0);
  return x;
}

template <class T>
std::vector<std::uint8_t> param_bytes(SegNet<T>& net) {
  std::vector<std::uint8_t> out;
  for (const auto& p : net.params()) {
    const auto* raw = reinterpret_cast<const std::uint8_t*>(p.value->data());
    out.insert(out.end(), raw, raw + p.value->size() * sizeof(T));
  }
  return out;
}

}  // namespace

TEST_CASE("seg_forward: distribution contract and eval determinism") {
  SegNet<float> net;
  net.configure(tiny_cfg());
  net.init(3);
  Workspace<float> ws;
  SegNet<float>::Cache c1, c2;
  const Tensor<float> x = random_image<float>(2, 16, 16, 5);

  net.forward(x, kModalityA, /*train=*/false, c1, ws, Backend::OpenMP);
  const std::size_t plane = 16 * 16;
  for (int i = 0; i < 2; ++i)
    for (std::size_t q = 0; q < plane; ++q) {
      float s = 0;
      for (int ch = 0; ch < 5; ++ch) s += c1.probs.v[(i * 5 + ch) * plane + q];
      CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
    }

  net.forward(x, kModalityA, false, c2, ws, Backend::OpenMP);
  CHECK(bit_equal(c1.probs, c2.probs));
  CHECK(c1.feat.c == 4);
  CHECK(c1.feat.h == 16);

  CHECK_THROWS_AS(net.forward(random_image<float>(1, 15, 15, 1), kModalityA, false, c1, ws,
                              Backend::OpenMP),
                  std::invalid_argument);
  CHECK_THROWS_AS(net.forward(x, 7, false, c1, ws, Backend::OpenMP), std::invalid_argument);
}

TEST_CASE("modality banks are the only cross-modality difference") {
  SegNet<float> net;
  net.configure(tiny_cfg());
  net.init(11);
  Workspace<float> ws;
  const Tensor<float> x = random_image<float>(1, 16, 16, 21);

  // Train a few steps on both modalities so the banks diverge.
  SgdMomentum<float> opt;
  for (int s = 0; s < 3; ++s) {
    for (int m = 0; m < 2; ++m) {
      SegNet<float>::Cache c;
      net.forward(random_image<float>(2, 16, 16, 100 + s * 2 + m), m, true, c, ws,
                  Backend::OpenMP);
      Tensor<float> dprobs(c.probs.n, c.probs.c, c.probs.h, c.probs.w);
      rng::Stream rs(200 + s * 2 + m);
      fill_uniform(dprobs, rs, -0.1, 0.1);
      net.zero_grads();
      net.backward(c, dprobs, nullptr, ws, Backend::OpenMP);
      opt.step(net.params());
    }
  }

  SegNet<float>::Cache ca, cb;
  net.forward(x, kModalityA, false, ca, ws, Backend::OpenMP);
  net.forward(x, kModalityB, false, cb, ws, Backend::OpenMP);
  CHECK_FALSE(bit_equal(ca.probs, cb.probs));  // banks diverged

  // Force bank B := bank A everywhere; outputs must become identical.
  for (ConvBnRelu<float>* u :
       {&net.e1a, &net.e1b, &net.e2a, &net.e2b, &net.ba, &net.bb, &net.d2a, &net.d2b, &net.d1a,
        &net.d1b})
    u->bn.banks[1] = u->bn.banks[0];
  net.forward(x, kModalityA, false, ca, ws, Backend::OpenMP);
  net.forward(x, kModalityB, false, cb, ws, Backend::OpenMP);
  CHECK(bit_equal(ca.probs, cb.probs));
}

TEST_CASE("parameter audit: unique names, banks disjoint, isolation under single-modality steps") {
  SegNet<float> net;
  net.configure(tiny_cfg());
  net.init(31);

  std::set<std::string> names;
  std::size_t bank_params = 0;
  for (const auto& p : net.params()) {
    CHECK(names.insert(p.name).second);
    if (p.name.find(".bn.") != std::string::npos) ++bank_params;
  }
  CHECK(bank_params == 10 * 2 * 2);  // 10 BN sites, 2 banks, gamma+beta

  // A training step on modality-A data leaves bank B bytes unchanged.
  Workspace<float> ws;
  SgdMomentum<float> opt;
  auto bank_b_bytes = [&net]() {
    std::vector<float> out;
    for (ConvBnRelu<float>* u :
         {&net.e1a, &net.e1b, &net.e2a, &net.e2b, &net.ba, &net.bb, &net.d2a, &net.d2b,
          &net.d1a, &net.d1b}) {
      auto& b = u->bn.banks[1];
      out.insert(out.end(), b.gamma.begin(), b.gamma.end());
      out.insert(out.end(), b.beta.begin(), b.beta.end());
      out.insert(out.end(), b.run_mean.begin(), b.run_mean.end());
      out.insert(out.end(), b.run_var.begin(), b.run_var.end());
    }
    return out;
  };
  const auto before = bank_b_bytes();
  SegNet<float>::Cache c;
  net.forward(random_image<float>(2, 16, 16, 41), kModalityA, true, c, ws, Backend::OpenMP);
  Tensor<float> dprobs(c.probs.n, c.probs.c, c.probs.h, c.probs.w);
  rng::Stream rs(42);
  fill_uniform(dprobs, rs, -0.1, 0.1);
  net.zero_grads();
  net.backward(c, dprobs, nullptr, ws, Backend::OpenMP);
  opt.step(net.params());
  CHECK(bank_b_bytes() == before);
}

TEST_CASE("full-model parameter gradients match finite differences") {
  SegNet<double> net;
  net.configure(tiny_cfg(4));
  net.init(51);
  Workspace<double> ws;
  const Tensor<double> x = random_image<double>(2, 8, 8, 52);

  // Random linear readout of probs and features exercises both backward
  // entry points (loss gradient and the adversarial feature gradient).
  Tensor<double> rp(2, 4, 8, 8), rf(2, 4, 8, 8);
  rng::Stream rs(53);
  fill_uniform(rp, rs, -1.0, 1.0);
  fill_uniform(rf, rs, -1.0, 1.0);

  auto loss = [&]() {
    SegNet<double>::Cache c;
    net.forward(x, kModalityA, true, c, ws, Backend::OpenMP);
    double acc = 0;
    for (std::size_t q = 0; q < c.probs.size(); ++q) acc += c.probs.v[q] * rp.v[q];
    for (std::size_t q = 0; q < c.feat.size(); ++q) acc += c.feat.v[q] * rf.v[q];
    return acc;
  };

  SegNet<double>::Cache c;
  net.forward(x, kModalityA, true, c, ws, Backend::OpenMP);
  net.zero_grads();
  net.backward(c, rp, &rf, ws, Backend::OpenMP);

  double worst = 0;
  for (auto& p : net.params()) {
    if (p.name.find(".b.") != std::string::npos) continue;  // inactive bank, grad 0
    const std::size_t stride = std::max<std::size_t>(1, p.value->size() / 6);
    worst = std::max(worst, test_util::fd_max_rel_err(*p.value, *p.grad, loss, 1e-5, stride));
  }
  CHECK(worst < 1e-4);

  // Inactive-bank gradients are exactly zero.
  for (auto& p : net.params())
    if (p.name.find(".b.") != std::string::npos)
      for (double g : *p.grad) CHECK(g == 0.0);
}

TEST_CASE("discriminator: shape contract and input gradients") {
  for (int stride : {1, 2}) {
    DiscriminatorConfig dc;
    dc.in_channels = 4;
    dc.width = 8;
    dc.out_channels = 6;  // M=5, M^a=2
    dc.stride = stride;
    Discriminator<double> d;
    d.configure(dc);
    d.init(61, kModalityA);

    Workspace<double> ws;
    Tensor<double> feat(1, 4, 16, 16);
    rng::Stream rs(62);
    fill_uniform(feat, rs, -1.0, 1.0);
    Discriminator<double>::Cache c;
    d.forward(feat, c, ws, Backend::OpenMP);
    CHECK(c.probs.c == 6);
    CHECK(c.probs.h == 16);  // upsampled back to feature resolution
    CHECK(c.probs.w == 16);
    const std::size_t plane = 16 * 16;
    for (std::size_t q = 0; q < plane; ++q) {
      double s = 0;
      for (int ch = 0; ch < 6; ++ch) s += c.probs.v[ch * plane + q];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }

    // d(readout)/d(features) via finite differences.
    Tensor<double> r(1, 6, 16, 16);
    fill_uniform(r, rs, -1.0, 1.0);
    auto loss = [&]() {
      Discriminator<double>::Cache ct;
      d.forward(feat, ct, ws, Backend::OpenMP);
      double acc = 0;
      for (std::size_t q = 0; q < ct.probs.size(); ++q) acc += ct.probs.v[q] * r.v[q];
      return acc;
    };
    Tensor<double> dfeat;
    d.zero_grads();
    d.backward(c, r, /*need_dx=*/true, /*accum_params=*/true, &dfeat, ws, Backend::OpenMP);
    CHECK(test_util::fd_max_rel_err(feat.v, dfeat.v, loss, 1e-5, 37) < 1e-4);
    double worst = 0;
    for (auto& p : d.params()) {
      const std::size_t stride_p = std::max<std::size_t>(1, p.value->size() / 5);
      worst = std::max(worst, test_util::fd_max_rel_err(*p.value, *p.grad, loss, 1e-5, stride_p));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("snapshot: copies round-trip bit-exactly and diverge after training") {
  SegNet<float> net;
  net.configure(tiny_cfg());
  net.init(71);
  Workspace<float> ws;
  const Tensor<float> x = random_image<float>(1, 16, 16, 72);

  SegNet<float> snap = net;  // snapshot
  CHECK(param_bytes(net) == param_bytes(snap));

  SegNet<float>::Cache c0, c1;
  net.forward(x, kModalityA, false, c0, ws, Backend::OpenMP);

  SgdMomentum<float> opt;
  for (int s = 0; s < 10; ++s) {
    SegNet<float>::Cache c;
    net.forward(random_image<float>(2, 16, 16, 80 + s), kModalityA, true, c, ws,
                Backend::OpenMP);
    Tensor<float> dprobs(c.probs.n, c.probs.c, c.probs.h, c.probs.w);
    rng::Stream rs(90 + s);
    fill_uniform(dprobs, rs, -0.1, 0.1);
    net.zero_grads();
    net.backward(c, dprobs, nullptr, ws, Backend::OpenMP);
    opt.step(net.params());
  }
  CHECK(param_bytes(net) != param_bytes(snap));  // two distinct states

  // Restore: the snapshot's eval outputs equal the snapshot-moment outputs.
  net = snap;
  net.forward(x, kModalityA, false, c1, ws, Backend::OpenMP);
  CHECK(bit_equal(c0.probs, c1.probs));
}
