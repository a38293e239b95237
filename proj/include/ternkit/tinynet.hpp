#pragma once

// Desk-scale quantization-aware training of a small residual MLP.
//
// Architecture: float stem Linear(in->H) + ReLU, then B residual blocks
//
//     a   = Q_a(x)                  (ternary activations, {0,1,2})
//     z   = a . Q_w(W)^T            (ternary weights, {-1,0,1})
//     zb  = BN(z)
//     id  = calibration ? CalBN(x) : x
//     x'  = ReLU(zb + id)
//
// and a float head Linear(H->classes). First and last layers stay
// full-precision. Quantized layers feed the integer level values straight
// into the matmul; all real-valued scaling lives in the (trainable) batch
// norm, which is what the folded inference affine reproduces, so lowering
// to packed kernels is exact up to float rounding.
//
// Gradients are hand-written per layer; the quantizers backpropagate with
// the STE rules from quantizer.hpp. Training is single-threaded and
// deterministic under a fixed seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ternkit/linalg.hpp"
#include "ternkit/quantizer.hpp"

namespace ternkit {

struct Dataset {
  std::vector<float> x;  // [n][dim]
  std::vector<int> y;
  int dim = 0;
  int n = 0;
};

/// Deterministic 4-class Gaussian clusters on a circle in 2D.
inline Dataset make_cluster_dataset(int per_class, unsigned seed,
                                    float radius = 2.2f, float stddev = 0.7f) {
  Dataset d;
  d.dim = 2;
  d.n = per_class * 4;
  d.x.resize(static_cast<std::size_t>(d.n) * 2);
  d.y.resize(d.n);
  std::mt19937 rng(seed);
  std::normal_distribution<float> noise(0.0f, stddev);
  for (int c = 0; c < 4; ++c) {
    const float ang = 2.0f * 3.14159265358979f * c / 4.0f + 0.4f;
    const float cx = radius * std::cos(ang), cy = radius * std::sin(ang);
    for (int i = 0; i < per_class; ++i) {
      const int idx = c * per_class + i;
      d.x[2 * idx] = cx + noise(rng);
      d.x[2 * idx + 1] = cy + noise(rng);
      d.y[idx] = c;
    }
  }
  return d;
}

struct BatchNorm {
  std::vector<float> gamma, beta, running_mean, running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  BatchNorm() = default;
  explicit BatchNorm(int features)
      : gamma(features, 1.0f),
        beta(features, 0.0f),
        running_mean(features, 0.0f),
        running_var(features, 1.0f) {}

  int features() const { return static_cast<int>(gamma.size()); }
};

struct QuantizedBlock {
  std::vector<float> w;  // [hidden][hidden], row-major, row = output feature
  QuantThresholds thr_w, thr_a;
  BatchNorm bn;
  BatchNorm cal_bn;  // identity-path calibration norm (used when enabled)
};

struct TinyNet {
  int in_dim = 2, hidden = 256, n_classes = 4;
  bool quantized = false;
  bool calibration = false;
  std::vector<float> stem_w, stem_b;  // [hidden][in_dim], [hidden]
  std::vector<QuantizedBlock> blocks;
  std::vector<float> head_w, head_b;  // [classes][hidden], [classes]
};

inline TinyNet make_tiny_net(int in_dim, int hidden, int n_blocks,
                             int n_classes, bool quantized, bool calibration,
                             unsigned seed) {
  TinyNet net;
  net.in_dim = in_dim;
  net.hidden = hidden;
  net.n_classes = n_classes;
  net.quantized = quantized;
  net.calibration = calibration;
  std::mt19937 rng(seed);
  auto init = [&](std::vector<float>& v, std::size_t n, int fan_in) {
    std::normal_distribution<float> dist(0.0f,
                                         std::sqrt(2.0f / static_cast<float>(fan_in)));
    v.resize(n);
    for (auto& e : v) e = dist(rng);
  };
  init(net.stem_w, static_cast<std::size_t>(hidden) * in_dim, in_dim);
  net.stem_b.assign(hidden, 0.0f);
  net.blocks.resize(n_blocks);
  for (auto& b : net.blocks) {
    init(b.w, static_cast<std::size_t>(hidden) * hidden, hidden);
    b.bn = BatchNorm(hidden);
    b.cal_bn = BatchNorm(hidden);
  }
  init(net.head_w, static_cast<std::size_t>(n_classes) * hidden, hidden);
  net.head_b.assign(n_classes, 0.0f);
  return net;
}

namespace detail {

// y[b][o] = sum_j x[b][j] * w[o][j] (+ bias)
inline void matmul_t(std::span<const float> x, std::span<const float> w,
                     std::span<const float> bias, int batch, int in_dim,
                     int out_dim, std::vector<float>& y) {
  y.assign(static_cast<std::size_t>(batch) * out_dim, 0.0f);
  for (int b = 0; b < batch; ++b) {
    const float* xr = x.data() + static_cast<std::size_t>(b) * in_dim;
    float* yr = y.data() + static_cast<std::size_t>(b) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const float* wr = w.data() + static_cast<std::size_t>(o) * in_dim;
      float acc = bias.empty() ? 0.0f : bias[o];
      for (int j = 0; j < in_dim; ++j) acc += xr[j] * wr[j];
      yr[o] = acc;
    }
  }
}

struct BnCache {
  std::vector<float> xhat;
  std::vector<float> mean, inv_std;
};

inline void bn_forward(BatchNorm& bn, std::span<const float> x, int batch,
                       bool training, std::vector<float>& y, BnCache* cache) {
  const int f = bn.features();
  y.resize(static_cast<std::size_t>(batch) * f);
  std::vector<float> mean(f, 0.0f), var(f, 0.0f);
  if (training) {
    for (int b = 0; b < batch; ++b) {
      for (int j = 0; j < f; ++j) mean[j] += x[static_cast<std::size_t>(b) * f + j];
    }
    for (int j = 0; j < f; ++j) mean[j] /= static_cast<float>(batch);
    for (int b = 0; b < batch; ++b) {
      for (int j = 0; j < f; ++j) {
        const float d = x[static_cast<std::size_t>(b) * f + j] - mean[j];
        var[j] += d * d;
      }
    }
    for (int j = 0; j < f; ++j) var[j] /= static_cast<float>(batch);
    for (int j = 0; j < f; ++j) {
      bn.running_mean[j] =
          (1 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
      bn.running_var[j] =
          (1 - bn.momentum) * bn.running_var[j] + bn.momentum * var[j];
    }
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  std::vector<float> inv_std(f);
  for (int j = 0; j < f; ++j) inv_std[j] = 1.0f / std::sqrt(var[j] + bn.eps);
  if (cache) {
    cache->xhat.resize(static_cast<std::size_t>(batch) * f);
    cache->mean = mean;
    cache->inv_std = inv_std;
  }
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < f; ++j) {
      const std::size_t i = static_cast<std::size_t>(b) * f + j;
      const float xh = (x[i] - mean[j]) * inv_std[j];
      if (cache) cache->xhat[i] = xh;
      y[i] = bn.gamma[j] * xh + bn.beta[j];
    }
  }
}

// Standard batch-norm backward over batch statistics.
inline void bn_backward(const BatchNorm& bn, const BnCache& cache,
                        std::span<const float> dy, int batch,
                        std::vector<float>& dx, std::vector<float>& dgamma,
                        std::vector<float>& dbeta) {
  const int f = bn.features();
  dx.assign(static_cast<std::size_t>(batch) * f, 0.0f);
  dgamma.assign(f, 0.0f);
  dbeta.assign(f, 0.0f);
  std::vector<float> sum_dy(f, 0.0f), sum_dy_xhat(f, 0.0f);
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < f; ++j) {
      const std::size_t i = static_cast<std::size_t>(b) * f + j;
      sum_dy[j] += dy[i];
      sum_dy_xhat[j] += dy[i] * cache.xhat[i];
    }
  }
  for (int j = 0; j < f; ++j) {
    dgamma[j] = sum_dy_xhat[j];
    dbeta[j] = sum_dy[j];
  }
  const float inv_b = 1.0f / static_cast<float>(batch);
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < f; ++j) {
      const std::size_t i = static_cast<std::size_t>(b) * f + j;
      dx[i] = bn.gamma[j] * cache.inv_std[j] *
              (dy[i] - inv_b * sum_dy[j] - cache.xhat[i] * inv_b * sum_dy_xhat[j]);
    }
  }
}

}  // namespace detail

struct BlockCache {
  std::vector<float> input;      // block input x (post-ReLU, nonneg)
  std::vector<float> act_q;      // Q_a(x) as floats (or x itself, float nets)
  std::vector<float> w_q;        // Q_w(W) as floats (or W)
  std::vector<float> z;          // act_q . w_q^T
  std::vector<float> zb;         // BN output
  std::vector<float> id;         // identity-path contribution
  std::vector<float> pre_relu;   // zb + id
  detail::BnCache bn_cache;
  detail::BnCache cal_cache;
};

struct ForwardCache {
  std::vector<float> stem_pre;   // stem output before ReLU
  std::vector<float> h0;         // ReLU(stem)
  std::vector<BlockCache> blocks;
  std::vector<float> features;   // input to the head
  std::vector<float> logits;
};

struct ForwardOptions {
  bool training = false;
  // Replace the quantizer round with identity; used by finite-difference
  // gradient checks, never by real training or inference.
  bool surrogate = false;
};

namespace detail {

inline float surrogate_weight(float p, const QuantThresholds& t) {
  return clipf(p / t.alpha1, -1.f, 0.f) + clipf(p / t.alpha2, 0.f, 1.f);
}
inline float surrogate_activation(float p, const QuantThresholds& t) {
  return clipf(p / t.alpha1, 0.f, 1.f) +
         clipf((p - t.alpha1) / t.alpha2, 0.f, 1.f);
}

}  // namespace detail

inline ForwardCache forward_qat(TinyNet& net, std::span<const float> x,
                                int batch, ForwardOptions opt = {}) {
  if (x.size() != static_cast<std::size_t>(batch) * net.in_dim) {
    throw std::invalid_argument("forward_qat: input shape mismatch");
  }
  ForwardCache cache;
  detail::matmul_t(x, net.stem_w, net.stem_b, batch, net.in_dim, net.hidden,
                   cache.stem_pre);
  cache.h0 = cache.stem_pre;
  for (auto& v : cache.h0) v = std::max(v, 0.0f);

  const int h = net.hidden;
  std::vector<float> cur = cache.h0;
  cache.blocks.resize(net.blocks.size());
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    QuantizedBlock& blk = net.blocks[bi];
    BlockCache& bc = cache.blocks[bi];
    bc.input = cur;

    if (net.quantized) {
      bc.act_q.resize(bc.input.size());
      for (std::size_t i = 0; i < bc.input.size(); ++i) {
        bc.act_q[i] = opt.surrogate
                          ? detail::surrogate_activation(bc.input[i], blk.thr_a)
                          : static_cast<float>(
                                quantize_activation_value(bc.input[i], blk.thr_a));
      }
      bc.w_q.resize(blk.w.size());
      for (std::size_t i = 0; i < blk.w.size(); ++i) {
        bc.w_q[i] = opt.surrogate
                        ? detail::surrogate_weight(blk.w[i], blk.thr_w)
                        : static_cast<float>(
                              quantize_weight_value(blk.w[i], blk.thr_w));
      }
    } else {
      bc.act_q = bc.input;
      bc.w_q = blk.w;
    }

    detail::matmul_t(bc.act_q, bc.w_q, {}, batch, h, h, bc.z);
    detail::bn_forward(blk.bn, bc.z, batch, opt.training, bc.zb, &bc.bn_cache);

    if (net.calibration) {
      detail::bn_forward(blk.cal_bn, bc.input, batch, opt.training, bc.id,
                         &bc.cal_cache);
    } else {
      bc.id = bc.input;
    }

    bc.pre_relu.resize(bc.zb.size());
    for (std::size_t i = 0; i < bc.zb.size(); ++i) {
      bc.pre_relu[i] = bc.zb[i] + bc.id[i];
    }
    cur = bc.pre_relu;
    for (auto& v : cur) v = std::max(v, 0.0f);
  }

  cache.features = cur;
  detail::matmul_t(cache.features, net.head_w, net.head_b, batch, h,
                   net.n_classes, cache.logits);
  return cache;
}

/// Mean softmax cross-entropy; fills per-logit gradients when asked.
inline float softmax_xent(std::span<const float> logits,
                          std::span<const int> labels, int batch, int classes,
                          std::vector<float>* dlogits = nullptr) {
  if (dlogits) dlogits->assign(static_cast<std::size_t>(batch) * classes, 0.0f);
  float loss = 0.0f;
  for (int b = 0; b < batch; ++b) {
    const float* row = logits.data() + static_cast<std::size_t>(b) * classes;
    float mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    float denom = 0.0f;
    for (int c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
    const float log_denom = std::log(denom) + mx;
    loss += log_denom - row[labels[b]];
    if (dlogits) {
      float* dr = dlogits->data() + static_cast<std::size_t>(b) * classes;
      for (int c = 0; c < classes; ++c) {
        dr[c] = (std::exp(row[c] - log_denom) - (c == labels[b] ? 1.0f : 0.0f)) /
                static_cast<float>(batch);
      }
    }
  }
  return loss / static_cast<float>(batch);
}

struct NetGrads {
  std::vector<float> stem_w, stem_b;
  struct BlockGrads {
    std::vector<float> w;
    float d_a1w = 0, d_a2w = 0, d_a1a = 0, d_a2a = 0;
    std::vector<float> bn_gamma, bn_beta;
    std::vector<float> cal_gamma, cal_beta;
  };
  std::vector<BlockGrads> blocks;
  std::vector<float> head_w, head_b;
};

inline NetGrads backward_qat(TinyNet& net, const ForwardCache& cache,
                             std::span<const float> x,
                             std::span<const float> dlogits, int batch) {
  const int h = net.hidden, cls = net.n_classes;
  NetGrads g;
  g.blocks.resize(net.blocks.size());

  // Head.
  g.head_w.assign(net.head_w.size(), 0.0f);
  g.head_b.assign(cls, 0.0f);
  std::vector<float> dcur(static_cast<std::size_t>(batch) * h, 0.0f);
  for (int b = 0; b < batch; ++b) {
    const float* feat = cache.features.data() + static_cast<std::size_t>(b) * h;
    const float* dl = dlogits.data() + static_cast<std::size_t>(b) * cls;
    float* dc = dcur.data() + static_cast<std::size_t>(b) * h;
    for (int c = 0; c < cls; ++c) {
      g.head_b[c] += dl[c];
      const float* wr = net.head_w.data() + static_cast<std::size_t>(c) * h;
      float* gw = g.head_w.data() + static_cast<std::size_t>(c) * h;
      for (int j = 0; j < h; ++j) {
        gw[j] += dl[c] * feat[j];
        dc[j] += dl[c] * wr[j];
      }
    }
  }

  // Blocks, last to first. dcur holds dL/d(block output, post-ReLU).
  for (int bi = static_cast<int>(net.blocks.size()) - 1; bi >= 0; --bi) {
    QuantizedBlock& blk = net.blocks[bi];
    const BlockCache& bc = cache.blocks[bi];
    auto& bg = g.blocks[bi];

    // Output ReLU gate.
    std::vector<float> dsum(dcur.size());
    for (std::size_t i = 0; i < dcur.size(); ++i) {
      dsum[i] = bc.pre_relu[i] > 0.0f ? dcur[i] : 0.0f;
    }

    // Residual branch: BN backward then matmul backward.
    std::vector<float> dz;
    detail::bn_backward(blk.bn, bc.bn_cache, dsum, batch, dz, bg.bn_gamma,
                        bg.bn_beta);

    std::vector<float> dwq(blk.w.size(), 0.0f);
    std::vector<float> dact(static_cast<std::size_t>(batch) * h, 0.0f);
    for (int b = 0; b < batch; ++b) {
      const float* aq = bc.act_q.data() + static_cast<std::size_t>(b) * h;
      const float* dzr = dz.data() + static_cast<std::size_t>(b) * h;
      float* da = dact.data() + static_cast<std::size_t>(b) * h;
      for (int o = 0; o < h; ++o) {
        const float d = dzr[o];
        if (d == 0.0f) continue;
        const float* wq = bc.w_q.data() + static_cast<std::size_t>(o) * h;
        float* dw = dwq.data() + static_cast<std::size_t>(o) * h;
        for (int j = 0; j < h; ++j) {
          dw[j] += d * aq[j];
          da[j] += d * wq[j];
        }
      }
    }

    std::vector<float> dinput(static_cast<std::size_t>(batch) * h, 0.0f);
    if (net.quantized) {
      QuantGrad wg =
          quantize_backward(blk.w, blk.thr_w, dwq, QuantMode::kWeight);
      bg.w = std::move(wg.d_input);
      bg.d_a1w = wg.d_alpha1;
      bg.d_a2w = wg.d_alpha2;
      QuantGrad ag = quantize_backward(bc.input, blk.thr_a, dact,
                                       QuantMode::kActivationNonneg);
      bg.d_a1a = ag.d_alpha1;
      bg.d_a2a = ag.d_alpha2;
      dinput = std::move(ag.d_input);
    } else {
      bg.w = std::move(dwq);
      dinput = std::move(dact);
    }

    // Identity path.
    if (net.calibration) {
      std::vector<float> did;
      detail::bn_backward(blk.cal_bn, bc.cal_cache, dsum, batch, did,
                          bg.cal_gamma, bg.cal_beta);
      for (std::size_t i = 0; i < dinput.size(); ++i) dinput[i] += did[i];
    } else {
      for (std::size_t i = 0; i < dinput.size(); ++i) dinput[i] += dsum[i];
    }
    dcur = std::move(dinput);
  }

  // Stem ReLU gate + linear backward.
  for (std::size_t i = 0; i < dcur.size(); ++i) {
    if (cache.stem_pre[i] <= 0.0f) dcur[i] = 0.0f;
  }
  g.stem_w.assign(net.stem_w.size(), 0.0f);
  g.stem_b.assign(h, 0.0f);
  for (int b = 0; b < batch; ++b) {
    const float* xr = x.data() + static_cast<std::size_t>(b) * net.in_dim;
    const float* dc = dcur.data() + static_cast<std::size_t>(b) * h;
    for (int o = 0; o < h; ++o) {
      g.stem_b[o] += dc[o];
      float* gw = g.stem_w.data() + static_cast<std::size_t>(o) * net.in_dim;
      for (int j = 0; j < net.in_dim; ++j) gw[j] += dc[o] * xr[j];
    }
  }
  return g;
}

struct Hyperparams {
  int epochs = 80;
  int batch_size = 64;
  float lr = 1e-2f;
  float momentum = 0.9f;
  float weight_decay = 2e-5f;
  unsigned seed = 1;
};

struct EpochMetrics {
  int epoch = 0;
  float loss = 0, train_acc = 0, test_acc = 0, lr = 0;
};

inline float evaluate(TinyNet& net, const Dataset& d) {
  ForwardCache c = forward_qat(net, d.x, d.n, {.training = false});
  int correct = 0;
  for (int i = 0; i < d.n; ++i) {
    const float* row = c.logits.data() + static_cast<std::size_t>(i) * net.n_classes;
    int arg = 0;
    for (int k = 1; k < net.n_classes; ++k) {
      if (row[k] > row[arg]) arg = k;
    }
    if (arg == d.y[i]) ++correct;
  }
  return 100.0f * correct / static_cast<float>(d.n);
}

/// SGD with momentum, cosine-annealed learning rate, weight decay on the
/// weight matrices, step-size parameters floored at 1e-4.
inline std::vector<EpochMetrics> train(TinyNet& net, const Dataset& train_set,
                                       const Dataset& test_set,
                                       const Hyperparams& hp) {
  struct Param {
    float* data;
    std::size_t n;
    bool decay;
    std::vector<float> vel;
  };
  std::vector<Param> params;
  auto reg = [&](std::vector<float>& v, bool decay) {
    params.push_back({v.data(), v.size(), decay, std::vector<float>(v.size(), 0.0f)});
  };
  auto reg1 = [&](float& v) {
    params.push_back({&v, 1, false, std::vector<float>(1, 0.0f)});
  };
  reg(net.stem_w, true);
  reg(net.stem_b, false);
  for (auto& b : net.blocks) {
    reg(b.w, true);
    reg1(b.thr_w.alpha1);
    reg1(b.thr_w.alpha2);
    reg1(b.thr_a.alpha1);
    reg1(b.thr_a.alpha2);
    reg(b.bn.gamma, false);
    reg(b.bn.beta, false);
    if (net.calibration) {
      reg(b.cal_bn.gamma, false);
      reg(b.cal_bn.beta, false);
    }
  }
  reg(net.head_w, true);
  reg(net.head_b, false);

  std::mt19937 rng(hp.seed);
  std::vector<int> order(train_set.n);
  for (int i = 0; i < train_set.n; ++i) order[i] = i;

  std::vector<EpochMetrics> log;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    const float lr =
        hp.lr * 0.5f *
        (1.0f + std::cos(3.14159265358979f * epoch / static_cast<float>(hp.epochs)));
    std::shuffle(order.begin(), order.end(), rng);

    float epoch_loss = 0.0f;
    int batches = 0, correct = 0;
    for (int start = 0; start < train_set.n; start += hp.batch_size) {
      const int bs = std::min(hp.batch_size, train_set.n - start);
      std::vector<float> bx(static_cast<std::size_t>(bs) * train_set.dim);
      std::vector<int> by(bs);
      for (int i = 0; i < bs; ++i) {
        const int src = order[start + i];
        std::copy_n(train_set.x.begin() + static_cast<std::size_t>(src) * train_set.dim,
                    train_set.dim, bx.begin() + static_cast<std::size_t>(i) * train_set.dim);
        by[i] = train_set.y[src];
      }

      ForwardCache cache = forward_qat(net, bx, bs, {.training = true});
      std::vector<float> dlogits;
      const float loss =
          softmax_xent(cache.logits, by, bs, net.n_classes, &dlogits);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch));
      }
      epoch_loss += loss;
      ++batches;
      for (int i = 0; i < bs; ++i) {
        const float* row =
            cache.logits.data() + static_cast<std::size_t>(i) * net.n_classes;
        int arg = 0;
        for (int k = 1; k < net.n_classes; ++k) {
          if (row[k] > row[arg]) arg = k;
        }
        if (arg == by[i]) ++correct;
      }

      NetGrads g = backward_qat(net, cache, bx, dlogits, bs);

      // Flatten gradients in registration order.
      std::vector<std::span<const float>> grads;
      grads.push_back(g.stem_w);
      grads.push_back(g.stem_b);
      std::vector<std::vector<float>> alpha_slots;
      alpha_slots.reserve(4 * net.blocks.size());  // spans below must stay valid
      for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
        auto& bg = g.blocks[bi];
        grads.push_back(bg.w);
        alpha_slots.push_back({bg.d_a1w});
        alpha_slots.push_back({bg.d_a2w});
        alpha_slots.push_back({bg.d_a1a});
        alpha_slots.push_back({bg.d_a2a});
        grads.push_back(alpha_slots[alpha_slots.size() - 4]);
        grads.push_back(alpha_slots[alpha_slots.size() - 3]);
        grads.push_back(alpha_slots[alpha_slots.size() - 2]);
        grads.push_back(alpha_slots[alpha_slots.size() - 1]);
        grads.push_back(bg.bn_gamma);
        grads.push_back(bg.bn_beta);
        if (net.calibration) {
          grads.push_back(bg.cal_gamma);
          grads.push_back(bg.cal_beta);
        }
      }
      grads.push_back(g.head_w);
      grads.push_back(g.head_b);
      if (grads.size() != params.size()) {
        throw std::runtime_error("optimizer registration mismatch");
      }

      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = params[pi];
        for (std::size_t i = 0; i < p.n; ++i) {
          float grad = grads[pi][i];
          if (p.decay) grad += hp.weight_decay * p.data[i];
          p.vel[i] = hp.momentum * p.vel[i] + grad;
          p.data[i] -= lr * p.vel[i];
        }
      }
      for (auto& b : net.blocks) {
        b.thr_w.alpha1 = std::max(b.thr_w.alpha1, 1e-4f);
        b.thr_w.alpha2 = std::max(b.thr_w.alpha2, 1e-4f);
        b.thr_a.alpha1 = std::max(b.thr_a.alpha1, 1e-4f);
        b.thr_a.alpha2 = std::max(b.thr_a.alpha2, 1e-4f);
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = epoch_loss / std::max(batches, 1);
    m.train_acc = 100.0f * correct / static_cast<float>(train_set.n);
    m.test_acc = evaluate(net, test_set);
    m.lr = lr;
    log.push_back(m);
  }
  return log;
}

/// Copy float-trained weights into a fresh quantized net (step sizes at
/// their 1.0 init, batch-norm state carried over).
inline TinyNet to_quantized(const TinyNet& float_net, bool calibration) {
  TinyNet q = float_net;
  q.quantized = true;
  q.calibration = calibration;
  for (auto& b : q.blocks) {
    b.thr_w = {};
    b.thr_a = {};
  }
  return q;
}

// ---------------------------------------------------------------------------
// Lowering to packed inference layers.

struct PackedBlock {
  PackedConvLayer layer;
  bool has_calibration = false;
  std::vector<float> cal_gain, cal_bias;
};

struct PackedModel {
  int in_dim = 0, hidden = 0, n_classes = 0;
  std::vector<float> stem_w, stem_b;
  std::vector<PackedBlock> blocks;
  std::vector<float> head_w, head_b;
};

inline PackedModel lower_to_packed(const TinyNet& net) {
  if (!net.quantized && !net.blocks.empty()) {
    throw std::invalid_argument("lower_to_packed: net is not quantized");
  }
  PackedModel m;
  m.in_dim = net.in_dim;
  m.hidden = net.hidden;
  m.n_classes = net.n_classes;
  m.stem_w = net.stem_w;
  m.stem_b = net.stem_b;
  m.head_w = net.head_w;
  m.head_b = net.head_b;
  for (const auto& blk : net.blocks) {
    PackedBlock pb;
    ConvGeometry geom;
    geom.in_c = net.hidden;
    geom.out_c = net.hidden;
    geom.kh = geom.kw = 1;
    geom.stride = 1;
    geom.pad = 0;
    ChannelAffine fused =
        fuse_bn(blk.bn.running_mean, blk.bn.running_var, blk.bn.gamma,
                blk.bn.beta, blk.bn.eps);
    pb.layer = make_packed_conv_layer_from_float(
        blk.w, geom, blk.thr_w, blk.thr_a, /*activation_nonneg=*/true,
        std::move(fused));
    if (net.calibration) {
      pb.has_calibration = true;
      ChannelAffine cal =
          fuse_bn(blk.cal_bn.running_mean, blk.cal_bn.running_var,
                  blk.cal_bn.gamma, blk.cal_bn.beta, blk.cal_bn.eps);
      pb.cal_gain = std::move(cal.gain);
      pb.cal_bias = std::move(cal.bias);
    }
    m.blocks.push_back(std::move(pb));
  }
  return m;
}

/// Inference over the packed model; the integer gemm core is exact, floats
/// only enter through the folded affines.
inline std::vector<float> packed_forward(const PackedModel& m,
                                         std::span<const float> x, int batch,
                                         MaskMode mask_mode = MaskMode::kOnTheFly) {
  std::vector<float> h;
  detail::matmul_t(x, m.stem_w, m.stem_b, batch, m.in_dim, m.hidden, h);
  for (auto& v : h) v = std::max(v, 0.0f);

  for (const auto& pb : m.blocks) {
    std::vector<float> z = fully_connected_ternary(h, batch, pb.layer, mask_mode);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const std::size_t j = i % m.hidden;
      const float id = pb.has_calibration
                           ? pb.cal_gain[j] * h[i] + pb.cal_bias[j]
                           : h[i];
      z[i] = std::max(z[i] + id, 0.0f);
    }
    h = std::move(z);
  }

  std::vector<float> logits;
  detail::matmul_t(h, m.head_w, m.head_b, batch, m.hidden, m.n_classes, logits);
  return logits;
}

inline std::vector<int> argmax_rows(std::span<const float> logits, int batch,
                                    int classes) {
  std::vector<int> out(batch);
  for (int b = 0; b < batch; ++b) {
    const float* row = logits.data() + static_cast<std::size_t>(b) * classes;
    int arg = 0;
    for (int c = 1; c < classes; ++c) {
      if (row[c] > row[arg]) arg = c;
    }
    out[b] = arg;
  }
  return out;
}

}  // namespace ternkit
