#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ternkit/tinynet.hpp"

using namespace ternkit;

TEST_CASE("cluster dataset is deterministic and labeled") {
  Dataset a = make_cluster_dataset(16, 9);
  Dataset b = make_cluster_dataset(16, 9);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK(a.n == 64);
  Dataset c = make_cluster_dataset(16, 10);
  CHECK(a.x != c.x);
}

TEST_CASE("identity calibration norm equals the plain residual forward") {
  TinyNet plain = make_tiny_net(2, 16, 2, 4, true, false, 1);
  TinyNet cal = plain;
  cal.calibration = true;
  for (auto& b : cal.blocks) {
    // freeze the calibration norm to the exact identity
    b.cal_bn.eps = 0.0f;
    std::fill(b.cal_bn.running_mean.begin(), b.cal_bn.running_mean.end(), 0.0f);
    std::fill(b.cal_bn.running_var.begin(), b.cal_bn.running_var.end(), 1.0f);
  }
  Dataset d = make_cluster_dataset(8, 2);
  ForwardCache a = forward_qat(plain, d.x, d.n, {.training = false});
  ForwardCache b = forward_qat(cal, d.x, d.n, {.training = false});
  REQUIRE(a.logits.size() == b.logits.size());
  for (std::size_t i = 0; i < a.logits.size(); ++i) {
    CHECK(a.logits[i] == Catch::Approx(b.logits[i]).margin(1e-5));
  }
}

TEST_CASE("single-block forward equals the hand-composed oracle") {
  TinyNet net = make_tiny_net(2, 8, 1, 4, true, false, 3);
  Dataset d = make_cluster_dataset(2, 4);
  const int batch = d.n;
  ForwardCache c = forward_qat(net, d.x, batch, {.training = false});
  const QuantizedBlock& blk = net.blocks[0];
  const int h = net.hidden;

  // stem
  std::vector<float> x0;
  detail::matmul_t(d.x, net.stem_w, net.stem_b, batch, 2, h, x0);
  for (auto& v : x0) v = std::max(v, 0.0f);
  // block
  std::vector<float> hid(static_cast<std::size_t>(batch) * h);
  for (int b = 0; b < batch; ++b) {
    for (int o = 0; o < h; ++o) {
      float z = 0;
      for (int j = 0; j < h; ++j) {
        const int a = quantize_activation_value(x0[static_cast<std::size_t>(b) * h + j],
                                                blk.thr_a);
        const int w = quantize_weight_value(blk.w[static_cast<std::size_t>(o) * h + j],
                                            blk.thr_w);
        z += static_cast<float>(a * w);
      }
      const float zb = blk.bn.gamma[o] * (z - blk.bn.running_mean[o]) /
                           std::sqrt(blk.bn.running_var[o] + blk.bn.eps) +
                       blk.bn.beta[o];
      hid[static_cast<std::size_t>(b) * h + o] =
          std::max(zb + x0[static_cast<std::size_t>(b) * h + o], 0.0f);
    }
  }
  std::vector<float> logits;
  detail::matmul_t(hid, net.head_w, net.head_b, batch, h, 4, logits);
  REQUIRE(c.logits.size() == logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    CHECK(c.logits[i] == Catch::Approx(logits[i]).margin(1e-4));
  }
}

TEST_CASE("full-loss gradients match finite differences on the surrogate net") {
  TinyNet net = make_tiny_net(2, 6, 2, 4, true, true, 7);
  const int batch = 8;
  Dataset d = make_cluster_dataset(2, 8);
  std::vector<int> labels(d.y.begin(), d.y.begin() + batch);

  auto loss_at = [&](TinyNet& n) {
    ForwardCache c = forward_qat(n, d.x, batch, {.training = true, .surrogate = true});
    return softmax_xent(c.logits, labels, batch, 4);
  };

  ForwardCache cache =
      forward_qat(net, d.x, batch, {.training = true, .surrogate = true});
  std::vector<float> dlogits;
  softmax_xent(cache.logits, labels, batch, 4, &dlogits);
  NetGrads g = backward_qat(net, cache, d.x, dlogits, batch);

  const float h = 1e-3f;
  std::mt19937 rng(9);
  auto check_param = [&](float* p, float analytic) {
    // batch statistics change with the parameter, so forward in training mode
    // both times; running-stat updates do not affect the loss value
    const float orig = *p;
    *p = orig + h;
    const float lp = loss_at(net);
    *p = orig - h;
    const float lm = loss_at(net);
    *p = orig;
    const float fd = (lp - lm) / (2 * h);
    const float scale = std::max({std::abs(fd), std::abs(analytic), 0.05f});
    CHECK(std::abs(fd - analytic) / scale < 2e-2f);
  };

  std::uniform_int_distribution<std::size_t> si(0, net.stem_w.size() - 1);
  for (int it = 0; it < 10; ++it) {
    const std::size_t i = si(rng);
    check_param(&net.stem_w[i], g.stem_w[i]);
  }
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    std::uniform_int_distribution<std::size_t> wi(0, net.blocks[bi].w.size() - 1);
    for (int it = 0; it < 10; ++it) {
      const std::size_t i = wi(rng);
      check_param(&net.blocks[bi].w[i], g.blocks[bi].w[i]);
    }
    check_param(&net.blocks[bi].bn.gamma[2], g.blocks[bi].bn_gamma[2]);
    check_param(&net.blocks[bi].bn.beta[3], g.blocks[bi].bn_beta[3]);
    check_param(&net.blocks[bi].cal_bn.gamma[1], g.blocks[bi].cal_gamma[1]);
    check_param(&net.blocks[bi].thr_w.alpha1, g.blocks[bi].d_a1w);
    check_param(&net.blocks[bi].thr_w.alpha2, g.blocks[bi].d_a2w);
    check_param(&net.blocks[bi].thr_a.alpha1, g.blocks[bi].d_a1a);
    check_param(&net.blocks[bi].thr_a.alpha2, g.blocks[bi].d_a2a);
  }
  for (std::size_t i = 0; i < 6; ++i) check_param(&net.head_w[i], g.head_w[i]);
}

TEST_CASE("short training run reduces the loss deterministically") {
  Dataset train_set = make_cluster_dataset(32, 11);
  Dataset test_set = make_cluster_dataset(8, 12);
  Hyperparams hp;
  hp.epochs = 15;
  hp.batch_size = 32;
  hp.seed = 13;

  TinyNet a = make_tiny_net(2, 16, 1, 4, false, false, 14);
  auto log_a = train(a, train_set, test_set, hp);
  TinyNet b = make_tiny_net(2, 16, 1, 4, false, false, 14);
  auto log_b = train(b, train_set, test_set, hp);
  REQUIRE(log_a.size() == 15);
  CHECK(log_a.back().loss == log_b.back().loss);
  CHECK(a.stem_w == b.stem_w);
  CHECK(log_a.back().loss < log_a.front().loss);
}

TEST_CASE("lowering a single quantized fc matches the simulated forward") {
  TinyNet net = make_tiny_net(2, 32, 1, 4, true, false, 15);
  // push running stats off the identity defaults
  Dataset d = make_cluster_dataset(16, 16);
  Hyperparams hp;
  hp.epochs = 3;
  hp.batch_size = 16;
  train(net, d, d, hp);

  PackedModel m = lower_to_packed(net);
  Dataset held = make_cluster_dataset(20, 17);
  ForwardCache c = forward_qat(net, held.x, held.n, {.training = false});
  std::vector<float> packed = packed_forward(m, held.x, held.n);
  REQUIRE(packed.size() == c.logits.size());
  for (std::size_t i = 0; i < packed.size(); ++i) {
    const float scale = std::max(1.0f, std::abs(c.logits[i]));
    CHECK(std::abs(packed[i] - c.logits[i]) / scale < 1e-5f);
  }
}

TEST_CASE("lowering with calibration preserves the simulated forward") {
  TinyNet net = make_tiny_net(2, 24, 2, 4, true, true, 18);
  Dataset d = make_cluster_dataset(16, 19);
  Hyperparams hp;
  hp.epochs = 3;
  hp.batch_size = 16;
  train(net, d, d, hp);
  PackedModel m = lower_to_packed(net);
  Dataset held = make_cluster_dataset(25, 20);
  ForwardCache c = forward_qat(net, held.x, held.n, {.training = false});
  std::vector<float> packed = packed_forward(m, held.x, held.n);
  std::vector<int> pa = argmax_rows(packed, held.n, 4);
  std::vector<int> pb = argmax_rows(c.logits, held.n, 4);
  int agree = 0;
  for (int i = 0; i < held.n; ++i) agree += pa[i] == pb[i];
  CHECK(agree == held.n);
}

TEST_CASE("lowering a block-free net gives an empty layer list") {
  TinyNet net = make_tiny_net(2, 8, 0, 4, false, false, 21);
  PackedModel m = lower_to_packed(net);
  CHECK(m.blocks.empty());
  Dataset d = make_cluster_dataset(4, 22);
  ForwardCache c = forward_qat(net, d.x, d.n, {.training = false});
  std::vector<float> packed = packed_forward(m, d.x, d.n);
  for (std::size_t i = 0; i < packed.size(); ++i) {
    CHECK(packed[i] == Catch::Approx(c.logits[i]).margin(1e-6));
  }
}

TEST_CASE("lowering rejects an unquantized net with blocks") {
  TinyNet net = make_tiny_net(2, 8, 1, 4, false, false, 23);
  CHECK_THROWS_AS(lower_to_packed(net), std::invalid_argument);
}

TEST_CASE("training aborts on divergence") {
  TinyNet net = make_tiny_net(2, 8, 1, 4, false, false, 24);
  net.stem_w[0] = std::numeric_limits<float>::quiet_NaN();
  Dataset d = make_cluster_dataset(8, 25);
  Hyperparams hp;
  hp.epochs = 1;
  CHECK_THROWS_AS(train(net, d, d, hp), std::runtime_error);
}
