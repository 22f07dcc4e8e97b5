#pragma once

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "psumml/kernels.hpp"
#include "psumml/label_algebra.hpp"
#include "psumml/rng.hpp"
#include "psumml/tensor.hpp"

// The segmentation network S = C ∘ F and the per-modality domain
// discriminators. Everything is a plain value type: copying a network is a
// snapshot, and comparing byte images of parameters is meaningful.
namespace psumml {

inline constexpr int kModalityA = 0;
inline constexpr int kModalityB = 1;

template <class T>
struct ParamRef {
  std::string name;
  std::vector<T>* value;
  std::vector<T>* grad;
};

template <class T>
struct BufferRef {
  std::string name;
  std::vector<T>* value;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class T>
struct Conv2d {
  int in_c = 0, out_c = 0, ksize = 3, stride = 1, pad = 1;
  bool has_bias = true;  // off for convs feeding a BN (bias would be a no-op)
  Tensor<T> weight;      // [out_c, in_c, k, k]
  std::vector<T> bias;
  Tensor<T> grad_weight;
  std::vector<T> grad_bias;

  void configure(int in, int out, int k, int stride_, int pad_, bool with_bias = true) {
    in_c = in;
    out_c = out;
    ksize = k;
    stride = stride_;
    pad = pad_;
    has_bias = with_bias;
    weight = Tensor<T>(out, in, k, k);
    bias.assign(with_bias ? out : 0, T(0));
    grad_weight = Tensor<T>(out, in, k, k);
    grad_bias.assign(with_bias ? out : 0, T(0));
  }

  void init_he(rng::Stream& rs) {
    const double std = std::sqrt(2.0 / (static_cast<double>(in_c) * ksize * ksize));
    for (auto& x : weight.v) x = static_cast<T>(rs.normal(0.0, std));
    std::fill(bias.begin(), bias.end(), T(0));
  }

  void forward(const Tensor<T>& x, Tensor<T>& y, kernels::Workspace<T>& ws,
               kernels::Backend be) const {
    if (x.c != in_c) throw std::invalid_argument("Conv2d: input channel mismatch");
    static const std::vector<T> no_bias;
    kernels::conv2d_forward(x, weight, has_bias ? bias : no_bias, stride, pad, y, ws, be);
  }

  // dx computed when need_dx; parameter grads accumulated when accum_params.
  void backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_dx, bool accum_params,
                Tensor<T>* dx, kernels::Workspace<T>& ws, kernels::Backend be) {
    kernels::conv2d_backward(x, weight, dy, stride, pad, need_dx ? dx : nullptr,
                             accum_params ? &grad_weight : nullptr,
                             (accum_params && has_bias) ? &grad_bias : nullptr, ws, be);
  }

  void zero_grads() {
    grad_weight.fill(T(0));
    std::fill(grad_bias.begin(), grad_bias.end(), T(0));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight.v, &grad_weight.v});
    if (has_bias) out.push_back({prefix + ".bias", &bias, &grad_bias});
  }
};

// Batch normalization with one affine/statistics bank per modality. The bank
// is selected per forward pass; everything else about the layer is shared.
template <class T>
struct DualBatchNorm {
  struct Bank {
    std::vector<T> gamma, beta, run_mean, run_var;
    std::vector<T> grad_gamma, grad_beta;
  };

  int channels = 0;
  T momentum = T(0.1);
  T eps = T(1e-5);
  Bank banks[2];

  struct Cache {
    int modality = 0;
    kernels::BnCache<T> bn;
  };

  void configure(int c) {
    channels = c;
    for (Bank& b : banks) {
      b.gamma.assign(c, T(1));
      b.beta.assign(c, T(0));
      b.run_mean.assign(c, T(0));
      b.run_var.assign(c, T(1));
      b.grad_gamma.assign(c, T(0));
      b.grad_beta.assign(c, T(0));
    }
  }

  void forward(const Tensor<T>& x, int modality, bool train, Tensor<T>& y, Cache& cache,
               kernels::Backend be) {
    Bank& bank = banks[modality];
    cache.modality = modality;
    kernels::bn_forward(x, bank.gamma, bank.beta, bank.run_mean, bank.run_var, momentum, eps,
                        train, y, cache.bn, be);
  }

  void backward(const Tensor<T>& x, const Tensor<T>& dy, const Cache& cache, bool accum_params,
                Tensor<T>& dx, kernels::Backend be) {
    Bank& bank = banks[cache.modality];
    if (accum_params) {
      kernels::bn_backward(x, dy, bank.gamma, cache.bn, dx, bank.grad_gamma, bank.grad_beta, be);
    } else {
      std::vector<T> g(channels, T(0)), b(channels, T(0));
      kernels::bn_backward(x, dy, bank.gamma, cache.bn, dx, g, b, be);
    }
  }

  void zero_grads() {
    for (Bank& b : banks) {
      std::fill(b.grad_gamma.begin(), b.grad_gamma.end(), T(0));
      std::fill(b.grad_beta.begin(), b.grad_beta.end(), T(0));
    }
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& params,
               std::vector<BufferRef<T>>& buffers) {
    const char* tag[2] = {"a", "b"};
    for (int m = 0; m < 2; ++m) {
      params.push_back({prefix + "." + tag[m] + ".gamma", &banks[m].gamma, &banks[m].grad_gamma});
      params.push_back({prefix + "." + tag[m] + ".beta", &banks[m].beta, &banks[m].grad_beta});
      buffers.push_back({prefix + "." + tag[m] + ".run_mean", &banks[m].run_mean});
      buffers.push_back({prefix + "." + tag[m] + ".run_var", &banks[m].run_var});
    }
  }
};

// conv -> dual-bank BN -> ReLU, the building block of the segmentation trunk.
template <class T>
struct ConvBnRelu {
  Conv2d<T> conv;
  DualBatchNorm<T> bn;

  struct Cache {
    Tensor<T> conv_out;
    Tensor<T> bn_out;
    typename DualBatchNorm<T>::Cache bnc;
  };

  void configure(int in, int out) {
    conv.configure(in, out, 3, 1, 1, /*with_bias=*/false);
    bn.configure(out);
  }

  void init(rng::Stream& rs) { conv.init_he(rs); }

  void forward(const Tensor<T>& x, int modality, bool train, Tensor<T>& y, Cache& c,
               kernels::Workspace<T>& ws, kernels::Backend be) {
    conv.forward(x, c.conv_out, ws, be);
    bn.forward(c.conv_out, modality, train, c.bn_out, c.bnc, be);
    kernels::leaky_relu_forward(c.bn_out, T(0), y, be);
  }

  void backward(const Tensor<T>& x, const Tensor<T>& dy, Cache& c, bool need_dx,
                bool accum_params, Tensor<T>* dx, kernels::Workspace<T>& ws,
                kernels::Backend be) {
    Tensor<T> dbn, dconv;
    kernels::leaky_relu_backward(c.bn_out, dy, T(0), dbn, be);
    bn.backward(c.conv_out, dbn, c.bnc, accum_params, dconv, be);
    conv.backward(x, dconv, need_dx, accum_params, dx, ws, be);
  }

  void zero_grads() {
    conv.zero_grads();
    bn.zero_grads();
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& params,
               std::vector<BufferRef<T>>& buffers) {
    conv.collect(prefix + ".conv", params);
    bn.collect(prefix + ".bn", params, buffers);
  }
};

// ---------------------------------------------------------------------------
// segmentation network
// ---------------------------------------------------------------------------

struct SegNetConfig {
  int in_channels = 1;
  int base_width = 16;
  int num_classes = 5;
};

// Three-resolution encoder-decoder with skip connections. The decoder's last
// hidden map doubles as the feature interface for the discriminators
// (W' = W, H' = H, I' = base_width).
template <class T>
struct SegNet {
  SegNetConfig cfg;
  ConvBnRelu<T> e1a, e1b, e2a, e2b, ba, bb, d2a, d2b, d1a, d1b;
  Conv2d<T> classifier;

  struct Cache {
    int modality = 0;
    bool train = false;
    Tensor<T> x;
    typename ConvBnRelu<T>::Cache u_e1a, u_e1b, u_e2a, u_e2b, u_ba, u_bb, u_d2a, u_d2b, u_d1a,
        u_d1b;
    Tensor<T> r1a, e1, p1, r2a, e2, p2, rba, bt, up2, cat2, rd2a, d2, up1, cat1, rd1a;
    std::vector<std::int32_t> idx1, idx2;
    Tensor<T> feat, logits, probs;
  };

  void configure(const SegNetConfig& c) {
    cfg = c;
    const int bw = c.base_width;
    e1a.configure(c.in_channels, bw);
    e1b.configure(bw, bw);
    e2a.configure(bw, 2 * bw);
    e2b.configure(2 * bw, 2 * bw);
    ba.configure(2 * bw, 4 * bw);
    bb.configure(4 * bw, 4 * bw);
    d2a.configure(6 * bw, 2 * bw);
    d2b.configure(2 * bw, 2 * bw);
    d1a.configure(3 * bw, bw);
    d1b.configure(bw, bw);
    classifier.configure(bw, c.num_classes, 1, 1, 0);
  }

  void init(std::uint64_t seed) {
    int li = 0;
    auto next = [&] { return rng::derive(seed, "seg_init", li++); };
    for (ConvBnRelu<T>* u : {&e1a, &e1b, &e2a, &e2b, &ba, &bb, &d2a, &d2b, &d1a, &d1b}) {
      rng::Stream rs = next();
      u->init(rs);
    }
    rng::Stream rs = next();
    classifier.init_he(rs);
  }

  // Fills cache; read cache.feat / cache.logits / cache.probs afterwards.
  void forward(const Tensor<T>& x, int modality, bool train, Cache& c,
               kernels::Workspace<T>& ws, kernels::Backend be) {
    if (x.h % 4 != 0 || x.w % 4 != 0)
      throw std::invalid_argument("SegNet: input size must be divisible by 4");
    if (modality != kModalityA && modality != kModalityB)
      throw std::invalid_argument("SegNet: unknown modality");
    c.modality = modality;
    c.train = train;
    c.x = x;
    e1a.forward(x, modality, train, c.r1a, c.u_e1a, ws, be);
    e1b.forward(c.r1a, modality, train, c.e1, c.u_e1b, ws, be);
    kernels::maxpool2_forward(c.e1, c.p1, c.idx1, be);
    e2a.forward(c.p1, modality, train, c.r2a, c.u_e2a, ws, be);
    e2b.forward(c.r2a, modality, train, c.e2, c.u_e2b, ws, be);
    kernels::maxpool2_forward(c.e2, c.p2, c.idx2, be);
    ba.forward(c.p2, modality, train, c.rba, c.u_ba, ws, be);
    bb.forward(c.rba, modality, train, c.bt, c.u_bb, ws, be);
    kernels::upsample2_forward(c.bt, c.up2, be);
    kernels::concat_channels(c.up2, c.e2, c.cat2);
    d2a.forward(c.cat2, modality, train, c.rd2a, c.u_d2a, ws, be);
    d2b.forward(c.rd2a, modality, train, c.d2, c.u_d2b, ws, be);
    kernels::upsample2_forward(c.d2, c.up1, be);
    kernels::concat_channels(c.up1, c.e1, c.cat1);
    d1a.forward(c.cat1, modality, train, c.rd1a, c.u_d1a, ws, be);
    d1b.forward(c.rd1a, modality, train, c.feat, c.u_d1b, ws, be);
    classifier.forward(c.feat, c.logits, ws, be);
    kernels::softmax_channels(c.logits, c.probs, be);
  }

  // dprobs: loss gradient on the softmax output. dfeat_extra: optional extra
  // gradient injected at the feature map (the adversarial term).
  void backward(Cache& c, const Tensor<T>& dprobs, const Tensor<T>* dfeat_extra,
                kernels::Workspace<T>& ws, kernels::Backend be) {
    Tensor<T> dlogits, dfeat;
    kernels::softmax_backward(c.probs, dprobs, dlogits, be);
    classifier.backward(c.feat, dlogits, true, true, &dfeat, ws, be);
    if (dfeat_extra) {
      assert(dfeat.same_shape(*dfeat_extra));
      for (std::size_t q = 0; q < dfeat.size(); ++q) dfeat.v[q] += dfeat_extra->v[q];
    }
    Tensor<T> drd1a, dcat1, dup1, de1_skip, dd2, drd2a, dcat2, dup2, de2_skip, dbt, drba, dp2,
        de2, dr2a, dp1, de1, dr1a;
    d1b.backward(c.rd1a, dfeat, c.u_d1b, true, true, &drd1a, ws, be);
    d1a.backward(c.cat1, drd1a, c.u_d1a, true, true, &dcat1, ws, be);
    kernels::split_channels(dcat1, c.up1.c, dup1, de1_skip);
    kernels::upsample2_backward(dup1, dd2, be);
    d2b.backward(c.rd2a, dd2, c.u_d2b, true, true, &drd2a, ws, be);
    d2a.backward(c.cat2, drd2a, c.u_d2a, true, true, &dcat2, ws, be);
    kernels::split_channels(dcat2, c.up2.c, dup2, de2_skip);
    kernels::upsample2_backward(dup2, dbt, be);
    bb.backward(c.rba, dbt, c.u_bb, true, true, &drba, ws, be);
    ba.backward(c.p2, drba, c.u_ba, true, true, &dp2, ws, be);
    kernels::maxpool2_backward(dp2, c.idx2, c.e2.h, c.e2.w, de2, be);
    for (std::size_t q = 0; q < de2.size(); ++q) de2.v[q] += de2_skip.v[q];
    e2b.backward(c.r2a, de2, c.u_e2b, true, true, &dr2a, ws, be);
    e2a.backward(c.p1, dr2a, c.u_e2a, true, true, &dp1, ws, be);
    kernels::maxpool2_backward(dp1, c.idx1, c.e1.h, c.e1.w, de1, be);
    for (std::size_t q = 0; q < de1.size(); ++q) de1.v[q] += de1_skip.v[q];
    e1b.backward(c.r1a, de1, c.u_e1b, true, true, &dr1a, ws, be);
    e1a.backward(c.x, dr1a, c.u_e1a, false, true, nullptr, ws, be);
  }

  void zero_grads() {
    for (ConvBnRelu<T>* u : {&e1a, &e1b, &e2a, &e2b, &ba, &bb, &d2a, &d2b, &d1a, &d1b})
      u->zero_grads();
    classifier.zero_grads();
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> ps;
    std::vector<BufferRef<T>> bs;
    collect(ps, bs);
    return ps;
  }

  std::vector<BufferRef<T>> buffers() {
    std::vector<ParamRef<T>> ps;
    std::vector<BufferRef<T>> bs;
    collect(ps, bs);
    return bs;
  }

  void collect(std::vector<ParamRef<T>>& ps, std::vector<BufferRef<T>>& bs) {
    e1a.collect("e1a", ps, bs);
    e1b.collect("e1b", ps, bs);
    e2a.collect("e2a", ps, bs);
    e2b.collect("e2b", ps, bs);
    ba.collect("ba", ps, bs);
    bb.collect("bb", ps, bs);
    d2a.collect("d2a", ps, bs);
    d2b.collect("d2b", ps, bs);
    d1a.collect("d1a", ps, bs);
    d1b.collect("d1b", ps, bs);
    classifier.collect("classifier", ps);
  }
};

// ---------------------------------------------------------------------------
// domain discriminator
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  int in_channels = 16;
  int width = 32;
  int out_channels = 0;  // 2 * (M - M^m)
  // First conv stride. The stack runs at feature_resolution / stride and the
  // class-logit map is upsampled back to W x H at the head.
  int stride = 2;
};

// Small convolutional stack ending in a per-pixel distribution over
// 2(M - M^m) domain-class channels at full image resolution.
template <class T>
struct Discriminator {
  DiscriminatorConfig cfg;
  Conv2d<T> c1, c2, c3, proj;
  static constexpr T kSlope = T(0.2);

  struct Cache {
    Tensor<T> x;
    Tensor<T> c1o, r1, c2o, r2, c3o, r3, plog, logits, probs;
  };

  void configure(const DiscriminatorConfig& c) {
    cfg = c;
    c1.configure(c.in_channels, c.width, 3, c.stride, 1);
    c2.configure(c.width, c.width, 3, 1, 1);
    c3.configure(c.width, c.width, 3, 1, 1);
    proj.configure(c.width, c.out_channels, 1, 1, 0);
  }

  void init(std::uint64_t seed, int which) {
    int li = 0;
    for (Conv2d<T>* layer : {&c1, &c2, &c3, &proj}) {
      rng::Stream rs = rng::derive(seed, which == kModalityA ? "disc_a_init" : "disc_b_init",
                                   li++);
      layer->init_he(rs);
    }
  }

  void forward(const Tensor<T>& x, Cache& c, kernels::Workspace<T>& ws, kernels::Backend be) {
    c.x = x;
    c1.forward(x, c.c1o, ws, be);
    kernels::leaky_relu_forward(c.c1o, kSlope, c.r1, be);
    c2.forward(c.r1, c.c2o, ws, be);
    kernels::leaky_relu_forward(c.c2o, kSlope, c.r2, be);
    c3.forward(c.r2, c.c3o, ws, be);
    kernels::leaky_relu_forward(c.c3o, kSlope, c.r3, be);
    proj.forward(c.r3, c.plog, ws, be);
    kernels::upsample_n_forward(c.plog, cfg.stride, c.logits, be);
    kernels::softmax_channels(c.logits, c.probs, be);
  }

  // dprobs: loss gradient on the output distribution. dx: gradient w.r.t.
  // the input features (for the encoder's adversarial term).
  void backward(Cache& c, const Tensor<T>& dprobs, bool need_dx, bool accum_params, Tensor<T>* dx,
                kernels::Workspace<T>& ws, kernels::Backend be) {
    Tensor<T> dlogits, dplog, dr3, dc3, dr2, dc2, dr1, dc1;
    kernels::softmax_backward(c.probs, dprobs, dlogits, be);
    kernels::upsample_n_backward(dlogits, cfg.stride, dplog, be);
    proj.backward(c.r3, dplog, true, accum_params, &dr3, ws, be);
    kernels::leaky_relu_backward(c.c3o, dr3, kSlope, dc3, be);
    c3.backward(c.r2, dc3, true, accum_params, &dr2, ws, be);
    kernels::leaky_relu_backward(c.c2o, dr2, kSlope, dc2, be);
    c2.backward(c.r1, dc2, true, accum_params, &dr1, ws, be);
    kernels::leaky_relu_backward(c.c1o, dr1, kSlope, dc1, be);
    c1.backward(c.x, dc1, need_dx, accum_params, dx, ws, be);
  }

  void zero_grads() {
    for (Conv2d<T>* layer : {&c1, &c2, &c3, &proj}) layer->zero_grads();
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> ps;
    c1.collect("c1", ps);
    c2.collect("c2", ps);
    c3.collect("c3", ps);
    proj.collect("proj", ps);
    return ps;
  }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// SGD with classical momentum: v = mu * v + g; p -= lr * v.
template <class T>
struct SgdMomentum {
  T lr = T(1e-3);
  T mu = T(0.9);
  std::vector<std::vector<T>> velocity;

  void step(const std::vector<ParamRef<T>>& params) {
    if (velocity.size() != params.size()) {
      velocity.clear();
      for (const auto& p : params) velocity.emplace_back(p.value->size(), T(0));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<T>& v = velocity[i];
      const std::vector<T>& g = *params[i].grad;
      std::vector<T>& w = *params[i].value;
      for (std::size_t q = 0; q < w.size(); ++q) {
        v[q] = mu * v[q] + g[q];
        w[q] -= lr * v[q];
      }
    }
  }
};

}  // namespace psumml
